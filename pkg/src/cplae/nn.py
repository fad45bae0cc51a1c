"""Network blocks, optimizers, learning-rate schedule and checkpoint I/O."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Holds named parameters (learnable) and buffers (running statistics)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, arr in state.items():
            if own[name].shape != tuple(arr.shape):
                raise CheckpointError(f"{name}: shape {tuple(arr.shape)} != expected {own[name].shape}")
            # write in place so Tensor handles held by optimizers stay valid
            own[name][...] = arr

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    use_batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def block_count(self) -> int:
        return len(self.channels)

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigurationError("backbone.channels must be a non-empty list of positive ints")
        size = self.image_size
        for _ in self.channels:
            size //= 2
        if size < 1:
            raise ConfigurationError(
                f"image_size {self.image_size} underflows after {self.block_count} 2x2 poolings"
            )


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._params = {"gamma": self.gamma, "beta": self.beta}
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            out, mu, var = ad.batch_norm2d(x, self.gamma, self.beta, self.eps)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * n / max(n - 1, 1)
            m = self.momentum
            self._buffers["running_mean"][...] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"][...] = (1 - m) * self._buffers["running_var"] + m * unbiased
            return out
        rm = self._buffers["running_mean"].reshape(1, -1, 1, 1)
        inv = (1.0 / np.sqrt(self._buffers["running_var"] + self.eps)).reshape(1, -1, 1, 1)
        xhat = (x - rm) * inv.astype(x.dtype)
        return xhat * self.gamma.reshape(1, -1, 1, 1) + self.beta.reshape(1, -1, 1, 1)


class Backbone(Module):
    """Conv4-style embedding network: [conv3x3 -> BN -> relu -> maxpool2] x blocks -> global avg pool."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels):
            fan_in = c_in * 9
            w = Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), fan_in, dtype), requires_grad=True)
            b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
            self._params[f"conv{i}.weight"] = w
            self._params[f"conv{i}.bias"] = b
            if config.use_batchnorm:
                self._children[f"bn{i}"] = BatchNorm2d(c_out, dtype, config.bn_momentum, config.bn_eps)
            c_in = c_out

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def __call__(self, images, training: bool = True) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"backbone expects (B,{cfg.in_channels},H,W), got {x.shape}")
        if min(x.shape[2], x.shape[3]) >> cfg.block_count < 1:
            raise ConfigurationError(f"spatial size {x.shape[2:]} underflows after {cfg.block_count} poolings")
        for i in range(cfg.block_count):
            x = ad.conv2d(x, self._params[f"conv{i}.weight"], stride=1, padding=1)
            x = x + self._params[f"conv{i}.bias"].reshape(1, -1, 1, 1)
            if cfg.use_batchnorm:
                x = self._children[f"bn{i}"](x, training)
            x = ad.max_pool2d(ad.relu(x), 2)
        return x.mean(axis=(2, 3))


def backbone_forward(backbone: Backbone, images, training: bool = True) -> Tensor:
    return backbone(images, training)


# ---------------------------------------------------------------------------
# attention integrator and projection head
# ---------------------------------------------------------------------------

class AttentionIntegrator(Module):
    """Single-head scaled dot-product self-attention over the views of one sample.

    ``out = softmax(Q K^T / sqrt(D)) V + X`` with ``Q = X W_q`` etc.  Token
    order is preserved; the residual can be switched off.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, tokens: int = 4, residual: bool = True):
        super().__init__()
        self.dim = dim
        self.tokens = tokens
        self.residual = residual
        for name in ("w_q", "w_k", "w_v"):
            self._params[name] = Tensor(kaiming_uniform(rng, (dim, dim), dim, dtype), requires_grad=True)

    def attention_weights(self, tokens: Tensor) -> Tensor:
        q = tokens @ self._params["w_q"]
        k = tokens @ self._params["w_k"]
        return ad.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim)), axis=-1)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim < 2 or tokens.shape[-2] != self.tokens:
            raise ContractError(f"integrator expects {self.tokens} tokens, got shape {tokens.shape}")
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"token dim {tokens.shape[-1]} != {self.dim}")
        out = self.attention_weights(tokens) @ (tokens @ self._params["w_v"])
        return out + tokens if self.residual else out


def attention_integrate(integrator: AttentionIntegrator, tokens: Tensor) -> Tensor:
    return integrator(tokens)


class ProjectionHead(Module):
    """affine -> relu -> affine."""

    def __init__(self, in_dim: int, rng: np.random.Generator, dtype=np.float32, hidden_dim: int | None = None, out_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        out_dim = out_dim or in_dim
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self._params = {
            "w1": Tensor(kaiming_uniform(rng, (in_dim, hidden_dim), in_dim, dtype), requires_grad=True),
            "b1": Tensor(np.zeros(hidden_dim, dtype=dtype), requires_grad=True),
            "w2": Tensor(kaiming_uniform(rng, (hidden_dim, out_dim), hidden_dim, dtype), requires_grad=True),
            "b2": Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
        }

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"projection head expects dim {self.in_dim}, got {x.shape[-1]}")
        p = self._params
        vec = x.ndim == 1
        if vec:
            x = x.reshape(1, -1)
        out = ad.relu(x @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
        return out.reshape(-1) if vec else out


def projection_forward(head: ProjectionHead, x: Tensor) -> Tensor:
    return head(x)


# ---------------------------------------------------------------------------
# optimizers and schedule
# ---------------------------------------------------------------------------

class Optimizer:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or i} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            grads.append(g)
        return grads

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


class SGDNesterov(Optimizer):
    """``g = grad + wd*theta; v = mu*v + g; theta -= lr*(g + mu*v)``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        mu = self.momentum
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= mu
            v += g
            p.data -= (self.lr * (g + mu * v)).astype(p.dtype, copy=False)
        self.step_count += 1


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**t, 1 - b2**t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 0.0, momentum: float = 0.9,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr, betas=betas, eps=eps, weight_decay=weight_decay)
    if kind == "sgd_nesterov":
        return SGDNesterov(params, lr, momentum=momentum, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer kind {kind!r}")


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()


def lr_schedule(initial_lr: float, epoch: int, step: int = 20, factor: float = 0.5) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * factor ** (epoch // step)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# little-endian:
#   magic   8 bytes  b"CPLAECKP"
#   version u32
#   count   u32
#   count x { name_len u32, name utf-8, rank u32, dims u32 * rank, data float32 * prod(dims) }

CHECKPOINT_MAGIC = b"CPLAECKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 16
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return state
