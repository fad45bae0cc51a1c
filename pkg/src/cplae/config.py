"""Run configuration: six JSON sections with defaults taken from the published setup."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PRESETS, CplConfig, apply_preset
from .data import DEFAULT_AUGMENTATIONS, EpisodeConfig, LabeledDataset, load_dataset, synth_generate
from .nn import BackboneConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str | None = None
    synth_classes: int = 100
    synth_per_class: int = 60
    synth_image_size: int = 32
    synth_channels: int = 3
    synth_seed: int = 0
    synth_noise: float = 0.15
    synth_clutter: int = 1
    synth_jitter: float = 0.06
    synth_split_counts: list[int] | None = None
    ways: int = 5
    shots: int = 5
    queries: int = 15
    augmentations: list[str] = field(default_factory=lambda: list(DEFAULT_AUGMENTATIONS))


@dataclass
class BackboneSection:
    channels: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    use_batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class OptimizerSection:
    kind: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_step: int = 20
    lr_factor: float = 0.5


@dataclass
class TrainSection:
    epochs: int = 100
    episodes_per_epoch: int = 100
    seed: int = 0
    preset: str = "cplae"
    val_episodes: int = 200
    pretrain: bool = False
    pretrain_epochs: int = 30
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-3
    dtype: str = "float32"


@dataclass
class EvalSection:
    episodes: int = 500
    seed: int = 2021
    split: str = "test"
    shots: int | None = None
    queries: int | None = None
    db_index: bool = True
    threads: int = 1


_SECTIONS = {
    "data": DataSection,
    "backbone": BackboneSection,
    "cplae": CplConfig,
    "optimizer": OptimizerSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    cplae: CplConfig = field(default_factory=CplConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigFileError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigFileError(f"unknown config section(s): {sorted(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigFileError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(body) - known
            if bad:
                raise ConfigFileError(f"unknown key(s) in section {name!r}: {sorted(bad)}")
            sections[name] = klass(**body)
        cfg = cls(**sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def validate(self) -> None:
        if self.train.preset not in PRESETS:
            raise ConfigFileError(f"train.preset: {self.train.preset!r} not in {PRESETS}")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigFileError("train.dtype must be float32 or float64")
        if self.optimizer.kind not in ("adam", "sgd_nesterov"):
            raise ConfigFileError(f"optimizer.kind: {self.optimizer.kind!r} not in ('adam', 'sgd_nesterov')")
        if self.train.epochs < 1 or self.train.episodes_per_epoch < 1:
            raise ConfigFileError("train.epochs and train.episodes_per_epoch must be >= 1")
        if self.eval.episodes < 1:
            raise ConfigFileError("eval.episodes must be >= 1")
        try:
            self.episode_config()
            self.effective_cpl().validate(self.data.queries)
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from None
        except RuntimeError as exc:
            raise ConfigFileError(str(exc)) from None

    # -- derived objects ------------------------------------------------------
    def episode_config(self, shots: int | None = None, queries: int | None = None) -> EpisodeConfig:
        d = self.data
        return EpisodeConfig(d.ways, shots or d.shots, queries or d.queries, tuple(d.augmentations))

    def eval_episode_config(self) -> EpisodeConfig:
        return self.episode_config(self.eval.shots, self.eval.queries)

    def effective_cpl(self, preset: str | None = None) -> CplConfig:
        return apply_preset(self.cplae, preset or self.train.preset)

    def backbone_config(self, dataset: LabeledDataset) -> BackboneConfig:
        c, h, w = dataset.image_shape
        if h != w:
            raise ConfigFileError(f"images must be square, got {h}x{w}")
        b = self.backbone
        return BackboneConfig(c, h, list(b.channels), b.use_batchnorm, b.bn_momentum, b.bn_eps)

    @property
    def np_dtype(self):
        return np.dtype(self.train.dtype)

    def load_data(self) -> LabeledDataset:
        d = self.data
        if d.manifest:
            return load_dataset(d.manifest)
        return synth_generate(d.synth_classes, d.synth_per_class, d.synth_image_size, d.synth_seed,
                              d.synth_channels, d.synth_split_counts, d.synth_noise,
                              d.synth_clutter, d.synth_jitter)
