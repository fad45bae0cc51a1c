"""Episodic meta-training with the combined objective, optional pre-training, run logs."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .core import FewShotModel, LossBreakdown, episode_loss
from .data import LabeledDataset, sample_episode
from .evaluation import episode_accuracy
from .nn import Optimizer, lr_schedule, make_optimizer

logger = logging.getLogger(__name__)

# random stream ids, see autodiff.make_rng
STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_LOSS = 2
STREAM_VAL = 3
STREAM_PRETRAIN = 5

CSV_FIELDS = ("epoch", "episode", "lr", "l_fsl", "l_cpl", "l_total", "val_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_acc: float | None = None
    wall_clock: float = 0.0
    pretrain_accuracy: float | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def summary(self) -> dict:
        return {
            "episodes": len(self.rows),
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "pretrain_accuracy": self.pretrain_accuracy,
            "wall_clock_seconds": self.wall_clock,
        }


@dataclass
class TrainResult:
    model: FewShotModel
    best_state: dict[str, np.ndarray]
    log: RunLog


def build_model(config: RunConfig, dataset: LabeledDataset, preset: str | None = None) -> FewShotModel:
    return FewShotModel(
        config.backbone_config(dataset),
        config.effective_cpl(preset),
        seed=config.train.seed,
        dtype=config.np_dtype,
        augmentations=config.data.augmentations,
    )


def pretrain_backbone(model: FewShotModel, dataset: LabeledDataset, config: RunConfig) -> float:
    """Plain classification over all training classes with a throw-away linear head.

    Returns top-1 accuracy on the training split (eval mode) after the last epoch.
    """
    t = config.train
    ids = dataset.split_ids("train")
    classes = np.unique(dataset.labels[ids])
    remap = np.full(dataset.labels.max() + 1, -1)
    remap[classes] = np.arange(len(classes))
    backbone = model.backbone
    D = backbone.embedding_dim
    dtype = config.np_dtype
    rng = ad.make_rng(t.seed, STREAM_INIT, 3)
    bound = math.sqrt(6.0 / D)
    head_w = Tensor(rng.uniform(-bound, bound, (D, len(classes))).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(len(classes), dtype=dtype), requires_grad=True)
    params = backbone.parameters() + [head_w, head_b]
    opt = make_optimizer("adam", params, t.pretrain_lr)
    for epoch in range(t.pretrain_epochs):
        order = ad.make_rng(t.seed, STREAM_PRETRAIN, epoch).permutation(ids)
        for start in range(0, len(order), t.pretrain_batch):
            batch = order[start : start + t.pretrain_batch]
            if len(batch) < 2:
                continue
            logits = backbone(dataset.images[batch].astype(dtype), training=True) @ head_w + head_b
            y = remap[dataset.labels[batch]]
            loss = -ad.log_softmax(logits, axis=1)[np.arange(len(batch)), y].mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    correct = 0
    with ad.no_grad():
        for start in range(0, len(ids), 256):
            batch = ids[start : start + 256]
            logits = backbone(dataset.images[batch].astype(dtype), training=False) @ head_w + head_b
            correct += int((logits.data.argmax(axis=1) == remap[dataset.labels[batch]]).sum())
    return correct / len(ids)


def train_step(model: FewShotModel, optimizer: Optimizer, episode, rng: np.random.Generator,
               episode_seed=None) -> LossBreakdown:
    """One iteration: embed, both losses, backward, update.  Returns the pre-update breakdown."""
    try:
        loss, breakdown = episode_loss(model, episode, rng, training=True)
    except ad.DomainError as exc:
        raise TrainingError(f"non-finite forward pass ({exc}) at episode seed {episode_seed}") from exc
    if not all(math.isfinite(v) for v in (breakdown.l_fsl, breakdown.l_cpl, breakdown.l_total)):
        raise TrainingError(f"non-finite loss {breakdown} at episode seed {episode_seed}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return breakdown


def validation_accuracy(model: FewShotModel, dataset: LabeledDataset, config: RunConfig) -> float | None:
    t = config.train
    index = dataset.class_index("val")
    ep_cfg = config.episode_config()
    if t.val_episodes < 1 or len(index) < ep_cfg.n:
        return None
    accs = []
    for i in range(t.val_episodes):
        ep = sample_episode(dataset, ep_cfg, ad.make_rng(t.seed, STREAM_VAL, i), "val", index)
        accs.append(episode_accuracy(model, ep))
    return float(np.mean(accs))


def pretrained_backbone_state(config: RunConfig, dataset: LabeledDataset) -> tuple[dict[str, np.ndarray], float]:
    """Pre-train a fresh backbone for ``config.train.seed``; the result is preset-independent."""
    model = build_model(config, dataset, preset="protonet")
    acc = pretrain_backbone(model, dataset, config)
    return copy.deepcopy(model.backbone.state_dict()), acc


def run_training(config: RunConfig, dataset: LabeledDataset, preset: str | None = None,
                 model: FewShotModel | None = None, progress=None,
                 pretrained: tuple[dict[str, np.ndarray], float] | None = None) -> TrainResult:
    """Meta-train for ``epochs x episodes_per_epoch`` episodes, keeping the best-by-validation state.

    Episode ``(e, i)`` is drawn from stream ``(seed, 1, e, i)`` and its loss
    randomness from ``(seed, 2, e, i)``, so runs with equal seeds see
    identical episodes whatever the preset.  ``pretrained`` (backbone state,
    accuracy) replaces the pre-training stage when it was already run.
    """
    t, o = config.train, config.optimizer
    start = time.perf_counter()
    model = model or build_model(config, dataset, preset)
    log = RunLog()
    if pretrained is not None:
        model.backbone.load_state_dict(pretrained[0])
        log.pretrain_accuracy = pretrained[1]
    elif t.pretrain:
        log.pretrain_accuracy = pretrain_backbone(model, dataset, config)
        logger.info("pretrain accuracy %.4f", log.pretrain_accuracy)
    optimizer = make_optimizer(o.kind, model.parameters(), o.lr, o.weight_decay, o.momentum, (o.beta1, o.beta2), o.eps)
    ep_cfg = config.episode_config()
    index = dataset.class_index("train")
    best_state = None
    for epoch in range(t.epochs):
        optimizer.lr = lr_schedule(o.lr, epoch, o.lr_step, o.lr_factor)
        rows = []
        for i in range(t.episodes_per_epoch):
            ep = sample_episode(dataset, ep_cfg, ad.make_rng(t.seed, STREAM_TRAIN, epoch, i), "train", index)
            b = train_step(model, optimizer, ep, ad.make_rng(t.seed, STREAM_LOSS, epoch, i), (t.seed, epoch, i))
            rows.append({"epoch": epoch, "episode": epoch * t.episodes_per_epoch + i, "lr": optimizer.lr,
                         "l_fsl": b.l_fsl, "l_cpl": b.l_cpl, "l_total": b.l_total, "val_acc": None})
        val = validation_accuracy(model, dataset, config)
        for r in rows:
            r["val_acc"] = val
        log.rows.extend(rows)
        summary = {
            "epoch": epoch,
            "lr": optimizer.lr,
            "l_fsl": float(np.mean([r["l_fsl"] for r in rows])),
            "l_cpl": float(np.mean([r["l_cpl"] for r in rows])),
            "l_total": float(np.mean([r["l_total"] for r in rows])),
            "val_acc": val,
        }
        log.epochs.append(summary)
        # without a validation split the last epoch wins
        if val is None or log.best_val_acc is None or val > log.best_val_acc:
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch = epoch
            log.best_val_acc = val
        msg = f"epoch {epoch:3d} lr {optimizer.lr:.2e} loss {summary['l_total']:.4f} val_acc {'-' if val is None else f'{val:.4f}'}"
        logger.info(msg)
        if progress:
            progress(msg)
    log.wall_clock = time.perf_counter() - start
    return TrainResult(model, best_state, log)


def write_run_outputs(result: TrainResult, config: RunConfig, out_dir) -> dict[str, Path]:
    from .nn import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "best.ckpt", "runlog": out / "runlog.csv", "summary": out / "summary.json",
             "config": out / "config.json"}
    save_checkpoint(paths["checkpoint"], result.best_state)
    # the effective config alone reproduces the run when passed back via --config
    paths["config"].write_text(json.dumps(config.to_dict(), indent=2))
    result.log.write_csv(paths["runlog"])
    paths["summary"].write_text(json.dumps({"config": config.to_dict(), **result.log.summary()}, indent=2))
    return paths
