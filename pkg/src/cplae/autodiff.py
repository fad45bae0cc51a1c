"""Dense tensors with reverse-mode differentiation, backed by numpy.

Every value in the model is a :class:`Tensor`.  An operation whose inputs
require gradients records its parents and a closure that maps the output
gradient to input gradients.  Nodes receive a monotonically increasing id at
construction, so sorting the reachable nodes by id is a valid topological
order and no recursion is needed during :meth:`Tensor.backward`.

Broadcasting follows numpy's trailing-dimension rule; gradients of broadcast
operands are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of the operation."""


class ContractError(RuntimeError):
    """A precondition of the API was violated."""


class GraphError(RuntimeError):
    """The computation graph was already consumed by a backward pass."""


_ids = itertools.count()
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Within this block (per thread) operations record no graph."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_id", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls(data)
        if not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    # -- differentiation -------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Leaves accumulate into an existing ``grad`` until :func:`zero_grad`
        is called.  A graph can be differentiated only once; a second call
        raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        if self._consumed:
            raise GraphError("backward called twice on the same graph; call zero_grad and rebuild")

        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in sorted(nodes, key=lambda t: t._id, reverse=True):
            g = grads.pop(node._id, None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise GraphError(f"node {node._op}#{node._id} belongs to a consumed graph")
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if pg.shape != parent.shape:
                        pg = _unbroadcast(pg, parent.shape)
                    pg = pg.astype(parent.dtype, copy=False)
                    if parent._id in grads:
                        grads[parent._id] = grads[parent._id] + pg
                    else:
                        grads[parent._id] = pg
            node._consumed = True
            node._backward = None


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    stack = [root]
    out = []
    while stack:
        node = stack.pop()
        out.append(node)
        for p in node._parents:
            if p._id not in seen and p.requires_grad:
                seen.add(p._id)
                stack.append(p)
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def graph_edges(root: Tensor) -> str:
    """Text edge list ``child_id child_op <- parent_id parent_op`` in construction order."""
    lines = []
    for node in sorted(_reachable(root), key=lambda t: t._id):
        for p in node._parents:
            lines.append(f"{node._id} {node._op} <- {p._id} {p._op}")
    return "\n".join(lines)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise DomainError(f"{op}: NaN in input")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape(a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape(a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    if (bd == 0).any():
        raise DomainError("div: division by zero")
    out = ad / bd
    return Tensor._make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def negate(a) -> Tensor:
    a = _lift(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if (a.data <= 0).any() or np.isnan(a.data).any():
        raise DomainError("log: non-positive input")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _lift(a)
    if (a.data < 0).any() or np.isnan(a.data).any():
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return Tensor._make(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    # np.maximum keeps NaN so a diverged forward pass is not silently zeroed
    return Tensor._make(np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def _binary(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "negate": negate,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of add, sub, mul, div, exp, log, sqrt, relu, negate."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis`` in the given order."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0]
    nd = ref.ndim
    ax = axis % nd if nd else 0
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref.shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref.shape} off axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: differing shapes {shapes}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``)."""
    a = _lift(a)
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in ax else s for i, s in enumerate(shape))

    if op_kind == "sum":
        out = a.data.sum(axis=ax, keepdims=keepdims)
        return Tensor._make(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")
    if op_kind == "mean":
        count = int(np.prod([shape[i] for i in ax])) if ax else 1
        out = a.data.mean(axis=ax, keepdims=keepdims)
        return Tensor._make(
            out, (a,), lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),), "mean"
        )
    if op_kind == "max":
        full = a.data.max(axis=ax, keepdims=True)
        out = full if keepdims else full.reshape([s for i, s in enumerate(shape) if i not in ax])

        def backward(g):
            mask = a.data == full
            # ties share the gradient equally
            return (mask * (g.reshape(kept) / mask.sum(axis=ax, keepdims=True)),)

        return Tensor._make(out, (a,), backward, "max")
    raise ContractError(f"unknown reduction {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch dimensions (numpy rules)."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    _check_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), backward, "log_softmax")


def softmax_ops(a: Tensor, axis: int = -1, log: bool = False) -> Tensor:
    return log_softmax(a, axis) if log else softmax(a, axis)


# ---------------------------------------------------------------------------
# distances and similarities
# ---------------------------------------------------------------------------

def pairwise_sqeuclidean(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance between every row of ``a`` and every row of ``b``.

    Computed from explicit differences so the result is exactly symmetric
    with a zero diagonal when ``a is b``.
    """
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqeuclidean: feature dims differ: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return Tensor._make(out, (a, b), backward, "pairwise_sqeuclidean")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Unit-norm rows.  With ``eps > 0`` norms are floored at ``eps`` (no gradient through the floor)."""
    a = _lift(a)
    raw = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if eps <= 0 and (raw == 0).any():
        raise DomainError("cosine similarity of a zero-norm vector")
    clamped = raw < eps
    norm = np.maximum(raw, eps) if eps > 0 else raw
    out = a.data / norm

    def backward(g):
        ga = (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm
        if clamped.any():
            ga = np.where(clamped, g / norm, ga)
        return (ga,)

    return Tensor._make(out, (a,), backward, "l2_normalize")


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``."""
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_cosine: feature dims differ: {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a, eps=eps), swapaxes(l2_normalize(b, eps=eps), 0, 1))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    return pairwise_cosine(reshape(a, (1, -1)), reshape(b, (1, -1))).reshape(())


# ---------------------------------------------------------------------------
# convolutional ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``kernel`` (F,C,kh,kw)."""
    x, kernel = _binary(x, kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(F, -1)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gk = (g2.T @ cols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gk

    return Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"max_pool2d: input {H}x{W} smaller than window {size}")
    xc = x.data[:, :, : Ho * size, : Wo * size]
    win = xc.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :, : Ho * size, : Wo * size] = (
            gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        )
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch norm over (B,H,W); returns output plus batch mean and biased variance."""
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * g4
        gx = inv / count * (count * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    out_t = Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm2d")
    return out_t, mu.reshape(-1), var.reshape(-1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float, worst: tuple[str, tuple] | None, checked: int):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.worst = worst
        self.checked = checked

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, tol={self.tol:g}, "
            f"passed={self.passed}, entries={self.checked}, worst={self.worst})"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients with central differences ``(f(p+h) - f(p-h)) / 2h``.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is (near) zero from dominating.
    ``max_entries`` optionally subsamples entries per parameter.
    """
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise DomainError("grad_check: objective is not finite")
    if loss.requires_grad:
        loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst_err, worst, checked = 0.0, None, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a_flat = analytic[pi].reshape(-1)
        for e in entries:
            orig = flat[e]
            flat[e] = orig + h
            fp = float(f().data)
            flat[e] = orig - h
            fm = float(f().data)
            flat[e] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError("grad_check: objective is not finite")
            num = (fp - fm) / (2 * h)
            a = float(a_flat[e])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err = err
                worst = (p.name or f"param{pi}", np.unravel_index(e, p.shape))
    zero_grad(params)
    return GradCheckReport(worst_err, tol, worst, checked)


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox-4x64 counter-based generator keyed by ``seed`` and an optional stream path.

    Streams are derived with numpy's ``SeedSequence`` so that e.g.
    ``make_rng(seed, 2, episode)`` gives an independent, reproducible
    generator per episode.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, stream)])))
