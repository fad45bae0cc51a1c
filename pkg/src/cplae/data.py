"""Datasets, netpbm ingestion, the procedural generator, augmentations and episode sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import ContractError

SPLITS = ("train", "val", "test")
AUGMENTATIONS = ("hflip", "vflip", "rot90", "rot180", "rot270")
DEFAULT_AUGMENTATIONS = ("hflip", "vflip", "rot270")


class IngestionError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images (N,C,H,W) in [0,1] with integer labels and a split tag per image."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise IngestionError("images, labels and splits differ in length")
        for c in np.unique(self.labels):
            tags = set(self.splits[self.labels == c])
            if len(tags) > 1:
                raise IngestionError(f"class {self.class_names[c]!r} appears in several splits {sorted(tags)}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def split_ids(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def classes(self, split: str) -> np.ndarray:
        return np.unique(self.labels[self.splits == split])

    def class_index(self, split: str) -> dict[int, np.ndarray]:
        ids = self.split_ids(split)
        return {int(c): ids[self.labels[ids] == c] for c in np.unique(self.labels[ids])}


# ---------------------------------------------------------------------------
# netpbm + manifest
# ---------------------------------------------------------------------------

def read_netpbm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 as (C,H,W) float32 in [0,1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic not in (b"P5", b"P6"):
        raise IngestionError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestionError(f"{path}: malformed netpbm file ({exc})") from None
    if arr.dtype != np.uint8:
        raise IngestionError(f"{path}: only maxval 255 is supported")
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / np.float32(255)


def write_netpbm(path, image: np.ndarray) -> None:
    """Write (C,H,W) values in [0,1] as P5 (C=1) or P6 (C=3), maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3,H,W) image, got {image.shape}")
    q = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0]).save(path, format="PPM")
    else:
        Image.fromarray(np.ascontiguousarray(q.transpose(1, 2, 0))).save(path, format="PPM")


def load_dataset(manifest_path) -> LabeledDataset:
    """Load a JSON-lines manifest of ``{"path", "label", "split"}`` records.

    Paths are resolved relative to the manifest's directory.  All images
    must share one shape.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestionError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    images, labels, splits = [], [], []
    names: dict[str, int] = {}
    shape = None
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            path, label, split = rec["path"], str(rec["label"]), rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"{manifest_path}:{lineno}: bad record ({exc})") from None
        if split not in SPLITS:
            raise IngestionError(f"{manifest_path}:{lineno}: split {split!r} not in {SPLITS}")
        file = root / path
        if not file.exists():
            raise IngestionError(f"{manifest_path}:{lineno}: image {file} does not exist")
        try:
            img = read_netpbm(file)
        except IngestionError as exc:
            raise IngestionError(f"{manifest_path}:{lineno}: {exc}") from None
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise IngestionError(f"{manifest_path}:{lineno}: image shape {img.shape} differs from {shape}")
        images.append(img)
        labels.append(names.setdefault(label, len(names)))
        splits.append(split)
    if not images:
        raise IngestionError(f"{manifest_path}: no records")
    return LabeledDataset(np.stack(images), np.array(labels), np.array(splits, dtype=object), list(names))


def write_dataset(dataset: LabeledDataset, out_dir, image_dir: str = "images") -> Path:
    """Write every image as PGM/PPM plus ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / image_dir).mkdir(parents=True, exist_ok=True)
    ext = "pgm" if dataset.images.shape[1] == 1 else "ppm"
    lines = []
    for i, (img, lab, split) in enumerate(zip(dataset.images, dataset.labels, dataset.splits)):
        rel = f"{image_dir}/{i:06d}.{ext}"
        write_netpbm(out_dir / rel, img)
        lines.append(json.dumps({"path": rel, "label": dataset.class_names[lab], "split": split}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# procedural generator
# ---------------------------------------------------------------------------

def default_split_counts(class_count: int) -> tuple[int, int, int]:
    """64/16/20 proportions (at least 5 classes in val and test) once there are >= 15 classes."""
    if class_count < 15:
        return class_count, 0, 0
    val = max(5, round(class_count * 0.16))
    test = max(5, round(class_count * 0.20))
    return class_count - val - test, val, test


def _render_bar(yy, xx, cy, cx, angle, length, width):
    dy, dx = math.sin(angle), math.cos(angle)
    ry, rx = yy - cy, xx - cx
    along = np.clip(ry * dy + rx * dx, -length / 2, length / 2)
    dist2 = (ry - along * dy) ** 2 + (rx - along * dx) ** 2
    return np.exp(-dist2 / (2 * width**2))


def _render_blob(yy, xx, cy, cx, radius):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))


@dataclass
class _Glyph:
    bars: list[tuple[float, float, float, float, float, np.ndarray]] = field(default_factory=list)
    blobs: list[tuple[float, float, float, np.ndarray]] = field(default_factory=list)


def _random_glyph(rng: np.random.Generator, size: int, channels: int) -> _Glyph:
    g = _Glyph()
    s = size
    for _ in range(rng.integers(2, 4)):
        g.bars.append((
            rng.uniform(0.2, 0.8) * s, rng.uniform(0.2, 0.8) * s,
            rng.uniform(0, math.pi), rng.uniform(0.3, 0.6) * s,
            rng.uniform(0.05, 0.09) * s, rng.uniform(0.5, 1.0, size=channels),
        ))
    for _ in range(rng.integers(1, 3)):
        g.blobs.append((
            rng.uniform(0.15, 0.85) * s, rng.uniform(0.15, 0.85) * s,
            rng.uniform(0.05, 0.1) * s, rng.uniform(0.5, 1.0, size=channels),
        ))
    return g


def _render_sample(rng: np.random.Generator, glyph: _Glyph, size: int, channels: int, noise: float,
                   clutter: int, jitter: float) -> np.ndarray:
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    img = np.zeros((channels, s, s))
    shift = rng.normal(0, jitter * s, size=2)
    for cy, cx, angle, length, width, color in glyph.bars:
        cy2, cx2 = cy + shift[0] + rng.normal(0, 0.03 * s), cx + shift[1] + rng.normal(0, 0.03 * s)
        a = angle + rng.normal(0, 0.15)
        L = length * rng.uniform(0.8, 1.2)
        img += color[:, None, None] * rng.uniform(0.7, 1.3) * _render_bar(yy, xx, cy2, cx2, a, L, width)
    for cy, cx, radius, color in glyph.blobs:
        cy2, cx2 = cy + shift[0] + rng.normal(0, 0.03 * s), cx + shift[1] + rng.normal(0, 0.03 * s)
        img += color[:, None, None] * rng.uniform(0.7, 1.3) * _render_blob(yy, xx, cy2, cx2, radius * rng.uniform(0.8, 1.2))
    for _ in range(clutter):
        img += rng.uniform(0.3, 0.8, size=(channels, 1, 1)) * _render_bar(
            yy, xx, rng.uniform(0, s), rng.uniform(0, s), rng.uniform(0, math.pi), rng.uniform(0.2, 0.5) * s, 0.06 * s
        )
    img += rng.normal(0, noise, size=img.shape)
    return np.clip(img, 0, 1)


def synth_generate(
    class_count: int,
    samples_per_class: int,
    image_size: int = 32,
    seed: int = 0,
    channels: int = 1,
    split_counts: Sequence[int] | None = None,
    noise: float = 0.15,
    clutter: int = 1,
    jitter: float = 0.06,
) -> LabeledDataset:
    """Procedural dataset: each class is a random arrangement of oriented bars and blobs.

    Samples shift the arrangement by ``jitter * image_size`` (std), perturb
    each element, add ``clutter`` random strokes and Gaussian pixel noise.
    Flips and rotations keep the class but move the image off the
    untransformed distribution.  Pixel values are quantized to multiples of
    1/255 so a netpbm round trip is exact.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if samples_per_class < 1 or image_size < 4 or channels not in (1, 3):
        raise ValueError("invalid samples_per_class, image_size or channels")
    counts = tuple(split_counts) if split_counts is not None else default_split_counts(class_count)
    if len(counts) != 3 or sum(counts) != class_count or min(counts) < 0:
        raise ValueError(f"split_counts {counts} must be three non-negative ints summing to {class_count}")
    root = np.random.SeedSequence(int(seed))
    class_seeds = root.spawn(class_count)
    images = np.empty((class_count * samples_per_class, channels, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    split_of_class = np.repeat(np.array(SPLITS, dtype=object), counts)
    for c, ss in enumerate(class_seeds):
        rng = np.random.Generator(np.random.Philox(ss))
        glyph = _random_glyph(rng, image_size, channels)
        for j in range(samples_per_class):
            img = _render_sample(rng, glyph, image_size, channels, noise, clutter, jitter)
            images[c * samples_per_class + j] = np.rint(img * 255) / 255
    return LabeledDataset(images, labels, split_of_class[labels], [f"c{c:03d}" for c in range(class_count)])


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------

def _rot90_cw(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != x.shape[-2]:
        raise ContractError(f"rotation needs square images, got {x.shape[-2:]}")
    # out[r, c] = in[H-1-c, r]
    return np.ascontiguousarray(np.swapaxes(x, -1, -2)[..., ::-1])


def augment(kind: str, image: np.ndarray) -> np.ndarray:
    """Apply one lossless pixel permutation to the last two axes.

    Rotations are clockwise; ``rot180``/``rot270`` are repeated ``rot90``.
    """
    if kind == "hflip":
        return np.ascontiguousarray(image[..., ::-1])
    if kind == "vflip":
        return np.ascontiguousarray(image[..., ::-1, :])
    if kind == "rot90":
        return _rot90_cw(image)
    if kind == "rot180":
        return _rot90_cw(_rot90_cw(image))
    if kind == "rot270":
        return _rot90_cw(_rot90_cw(_rot90_cw(image)))
    raise ContractError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeConfig:
    n: int = 5
    k: int = 5
    q: int = 15
    augmentations: tuple[str, ...] = DEFAULT_AUGMENTATIONS

    def __post_init__(self):
        self.augmentations = tuple(self.augmentations)
        if self.n < 2 or self.k < 1 or self.q < 1:
            raise ContractError(f"invalid episode shape n={self.n} k={self.k} q={self.q}")
        if len(set(self.augmentations)) != len(self.augmentations):
            raise ContractError(f"duplicate augmentations {self.augmentations}")
        if not 1 <= len(self.augmentations) <= 4:
            raise ContractError("augmentation list must have 1-4 entries")
        for a in self.augmentations:
            if a not in AUGMENTATIONS:
                raise ContractError(f"unknown augmentation {a!r}")


@dataclass
class Episode:
    """Support and query sets, ordered class-major; labels are episode-local (0..n-1)."""

    support_images: np.ndarray
    support_labels: np.ndarray
    support_ids: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    query_ids: np.ndarray
    classes: np.ndarray
    n: int
    k: int
    q: int


def sample_episode(dataset: LabeledDataset, config: EpisodeConfig, rng: np.random.Generator, split: str = "train",
                   index: dict[int, np.ndarray] | None = None) -> Episode:
    """Draw n classes without replacement, then k+q distinct samples per class."""
    index = index if index is not None else dataset.class_index(split)
    n, k, q = config.n, config.k, config.q
    pool = np.array(sorted(index))
    if len(pool) < n:
        raise SamplingError(f"split {split!r} has {len(pool)} classes, need {n}")
    classes = rng.choice(pool, size=n, replace=False)
    s_ids, q_ids = [], []
    for c in classes:
        ids = index[int(c)]
        if len(ids) < k + q:
            raise SamplingError(f"class {dataset.class_names[c]!r} has {len(ids)} samples, need {k + q}")
        pick = rng.choice(ids, size=k + q, replace=False)
        s_ids.append(pick[:k])
        q_ids.append(pick[k:])
    s_ids = np.concatenate(s_ids)
    q_ids = np.concatenate(q_ids)
    return Episode(
        support_images=dataset.images[s_ids],
        support_labels=np.repeat(np.arange(n), k),
        support_ids=s_ids,
        query_images=dataset.images[q_ids],
        query_labels=np.repeat(np.arange(n), q),
        query_ids=q_ids,
        classes=classes,
        n=n, k=k, q=q,
    )
