"""Meta-test protocol, confidence intervals, Davies-Bouldin index, embedding export, ablations."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError
from .core import PRESETS, FewShotModel, classify_queries, compute_prototypes, embed_episode
from .data import Episode, EpisodeConfig, LabeledDataset, sample_episode

STREAM_TEST = 4


def confidence_interval(values: Sequence[float], z: float = 1.96) -> tuple[float, float]:
    """Mean and ``z * s / sqrt(N)`` with the sample (N-1) standard deviation; zero for N = 1."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("confidence interval of an empty sample")
    # constant samples are reported exactly instead of with summation round-off
    if len(v) < 2 or v.min() == v.max():
        return float(v[0]), 0.0
    mean = float(v.mean())
    return mean, float(z * v.std(ddof=1) / np.sqrt(len(v)))


def davies_bouldin(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Davies-Bouldin index with Euclidean scatter (mean distance to the centroid)."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DomainError("Davies-Bouldin index needs at least two classes")
    centroids = np.stack([x[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(x[labels == c] - centroids[i], axis=1).mean() for i, c in enumerate(classes)])
    sep = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    off = ~np.eye(len(classes), dtype=bool)
    if (sep[off] == 0).any():
        raise DomainError("Davies-Bouldin index undefined: two class centroids coincide")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


@dataclass
class EpisodeResult:
    accuracy: float
    db_index: float | None


def evaluate_episode(model: FewShotModel, episode: Episode, db: bool = False) -> EpisodeResult:
    """Classify one episode's queries with ordered (unshuffled) embeddings in eval mode."""
    with ad.no_grad():
        emb = embed_episode(model, episode, training=False, shuffled=False)
        protos = compute_prototypes(emb.support, episode.support_labels, episode.n, episode.k)
        pred = classify_queries(emb.query, protos)
    acc = float((pred == episode.query_labels).mean())
    db_val = None
    if db:
        x = np.concatenate([emb.support.data, emb.query.data])
        y = np.concatenate([episode.support_labels, episode.query_labels])
        db_val = davies_bouldin(x, y)
    return EpisodeResult(acc, db_val)


def episode_accuracy(model: FewShotModel, episode: Episode) -> float:
    return evaluate_episode(model, episode).accuracy


@dataclass
class EvalReport:
    episode_count: int
    accuracies: list[float]
    mean: float
    ci_halfwidth: float
    db_index: float | None
    ways: int
    shots: int
    seed: int
    config: dict = field(default_factory=dict)
    db_per_episode: list[float] | None = None

    @classmethod
    def from_accuracies(cls, accuracies, ways: int, shots: int, seed: int, db=None, config=None) -> "EvalReport":
        mean, ci = confidence_interval(accuracies)
        db_mean = float(np.mean(db)) if db else None
        return cls(len(accuracies), list(map(float, accuracies)), mean, ci, db_mean, ways, shots, seed,
                   config or {}, list(db) if db else None)

    def format_line(self) -> str:
        return f"{self.ways}-way {self.shots}-shot: {100 * self.mean:.2f} ± {100 * self.ci_halfwidth:.2f}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def test_episodes(dataset: LabeledDataset, ep_cfg: EpisodeConfig, count: int, seed: int, split: str = "test"):
    """Episode ``i`` comes from stream ``(seed, 4, i)`` so every model sees the same episodes."""
    index = dataset.class_index(split)
    for i in range(count):
        yield sample_episode(dataset, ep_cfg, ad.make_rng(seed, STREAM_TEST, i), split, index)


def meta_test(model: FewShotModel, dataset: LabeledDataset, ep_cfg: EpisodeConfig, episode_count: int = 500,
              seed: int = 2021, split: str = "test", db: bool = True, threads: int = 1,
              config: dict | None = None) -> EvalReport:
    """Accuracy over ``episode_count`` seeded episodes, with 95% CI and mean DB index."""
    episodes = list(test_episodes(dataset, ep_cfg, episode_count, seed, split))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda e: evaluate_episode(model, e, db), episodes))
    else:
        results = [evaluate_episode(model, e, db) for e in episodes]
    accs = [r.accuracy for r in results]
    dbs = [r.db_index for r in results] if db else None
    return EvalReport.from_accuracies(accs, ep_cfg.n, ep_cfg.k, seed, dbs, config)


def export_embeddings(model: FewShotModel, episodes: Sequence[Episode], path) -> int:
    """CSV rows ``episode, sample_id, role, label, e0..e{d-1}``; returns the number of data rows."""
    rows = 0
    with open(path, "w", newline="") as fh:
        w = None
        for e_id, ep in enumerate(episodes):
            with ad.no_grad():
                emb = embed_episode(model, ep, training=False, shuffled=False)
            if w is None:
                w = csv.writer(fh)
                w.writerow(["episode", "sample_id", "role", "label"] + [f"e{j}" for j in range(emb.query.shape[1])])
            for role, ids, labels, x in (
                ("support", ep.support_ids, ep.support_labels, emb.support.data),
                ("query", ep.query_ids, ep.query_labels, emb.query.data),
            ):
                for sid, lab, vec in zip(ids, labels, x):
                    w.writerow([e_id, int(sid), role, int(ep.classes[lab])] + [repr(float(v)) for v in vec])
                    rows += 1
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    preset: str
    mean: float
    ci_halfwidth: float
    db_index: float
    seed_means: list[float]
    seed_db: list[float]


@dataclass
class AblationResult:
    seeds: list[int]
    rows: list[AblationRow]
    config: dict

    def row(self, preset: str) -> AblationRow:
        return next(r for r in self.rows if r.preset == preset)

    def to_text(self) -> str:
        lines = [f"seeds: {' '.join(map(str, self.seeds))}",
                 f"{'preset':<18}{'accuracy (%)':>18}{'DB index':>12}"]
        for r in self.rows:
            acc = f"{100 * r.mean:.2f} ± {100 * r.ci_halfwidth:.2f}"
            lines.append(f"{r.preset:<18}{acc:>18}{r.db_index:>12.4f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["preset", "mean_acc", "ci_halfwidth", "db_index"]
                       + [f"acc_seed{s}" for s in self.seeds] + [f"db_seed{s}" for s in self.seeds])
            for r in self.rows:
                w.writerow([r.preset, repr(r.mean), repr(r.ci_halfwidth), repr(r.db_index)]
                           + [repr(v) for v in r.seed_means] + [repr(v) for v in r.seed_db])


def ablation_run(dataset: LabeledDataset, config, seeds: Sequence[int], presets: Sequence[str] = PRESETS,
                 progress=None) -> AblationResult:
    """Train and meta-test every preset for every seed on shared episode streams.

    Per seed, all presets share the training episode stream, the backbone
    initialization (or pre-trained backbone) and the meta-test episodes.  The reported CI pools all
    seeds' episodes.
    """
    import dataclasses

    from .trainer import pretrained_backbone_state, run_training

    per_preset = {p: {"acc": [], "db": [], "all": []} for p in presets}
    ep_cfg = config.eval_episode_config()
    for seed in seeds:
        cfg = dataclasses.replace(config, train=dataclasses.replace(config.train, seed=seed, preset="cplae"))
        pretrained = pretrained_backbone_state(cfg, dataset) if cfg.train.pretrain else None
        for preset in presets:
            result = run_training(cfg, dataset, preset=preset, pretrained=pretrained)
            result.model.load_state_dict(result.best_state)
            report = meta_test(result.model, dataset, ep_cfg, config.eval.episodes, config.eval.seed,
                               config.eval.split, db=True, threads=config.eval.threads)
            per_preset[preset]["acc"].append(report.mean)
            per_preset[preset]["db"].append(report.db_index)
            per_preset[preset]["all"].extend(report.accuracies)
            if progress:
                progress(f"seed {seed} {preset:<16} acc {100 * report.mean:.2f} db {report.db_index:.4f}")
    rows = []
    for p in presets:
        _, ci = confidence_interval(per_preset[p]["all"])
        rows.append(AblationRow(p, float(np.mean(per_preset[p]["acc"])), ci, float(np.mean(per_preset[p]["db"])),
                                per_preset[p]["acc"], per_preset[p]["db"]))
    return AblationResult(list(seeds), rows, config.to_dict())
