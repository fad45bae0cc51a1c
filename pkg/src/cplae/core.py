"""Augmented embeddings, prototypes, the query-centered and prototype-centered losses.

Shapes used throughout (n ways, k shots, q queries, V = 1 + number of
augmentations, D backbone width):

* tokens          (samples, V, D) post-attention view embeddings
* augmented emb.  (samples, V*D) blocks concatenated in a given order
* prototypes      (n, V*D)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .data import DEFAULT_AUGMENTATIONS, Episode, augment
from .nn import AttentionIntegrator, Backbone, BackboneConfig, Module, ProjectionHead

# norm floor inside the contrastive loss: a dead relu layer can project a query to exactly zero
COSINE_EPS = 1e-12

PRESETS = ("protonet", "protonet_ae", "cplae_noshuffle", "cplae")


class ConfigError(ValueError):
    pass


@dataclass
class CplConfig:
    """Loss and model switches for one run.

    ``anchor_mode``: ``prototype`` or ``support_sample``.
    ``shuffle_mode``: ``fixed`` keeps (original, aug2, aug3, ..., aug1);
    ``random`` draws a fresh permutation of the augmented blocks per episode.
    ``fsl_normalization``: ``mean`` divides by n*q, ``literal`` by q.
    ``distance``: ``sqeuclidean`` or ``euclidean``.
    ``projection_out``: ``None`` means the augmented-embedding width, which
    is required when the anchor is not projected.
    """

    temperature: float = 1.0
    negatives_per_class: int = 6
    lam: float = 0.1
    use_ae: bool = True
    anchor_mode: str = "prototype"
    use_projection: bool = True
    project_anchor: bool = False
    shuffle_queries: bool = True
    shuffle_mode: str = "fixed"
    projection_hidden: int | None = None
    projection_out: int | None = None
    fsl_normalization: str = "mean"
    distance: str = "sqeuclidean"
    attention_residual: bool = True

    def validate(self, q: int | None = None) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.negatives_per_class < 1:
            raise ConfigError("negatives_per_class must be >= 1")
        if q is not None and self.negatives_per_class > q:
            raise ConfigError(f"negatives_per_class={self.negatives_per_class} exceeds queries per class q={q}")
        for name, value, allowed in (
            ("anchor_mode", self.anchor_mode, ("prototype", "support_sample")),
            ("shuffle_mode", self.shuffle_mode, ("fixed", "random")),
            ("fsl_normalization", self.fsl_normalization, ("mean", "literal")),
            ("distance", self.distance, ("sqeuclidean", "euclidean")),
        ):
            if value not in allowed:
                raise ConfigError(f"{name}={value!r} not in {allowed}")

    @property
    def uses_cpl(self) -> bool:
        return self.lam > 0


def apply_preset(config: CplConfig, preset: str) -> CplConfig:
    """Return the effective loss config for one ablation row."""
    if preset == "protonet":
        return replace(config, use_ae=False, lam=0.0)
    if preset == "protonet_ae":
        return replace(config, use_ae=True, lam=0.0)
    if preset == "cplae_noshuffle":
        return replace(config, use_ae=True, shuffle_queries=False)
    if preset == "cplae":
        return replace(config, use_ae=True)
    raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")


@dataclass
class LossBreakdown:
    l_fsl: float
    l_cpl: float
    l_total: float
    posteriors: np.ndarray = field(repr=False, default=None)


@dataclass
class EpisodeEmbedding:
    support: Tensor
    query: Tensor
    query_shuffled: Tensor | None
    shuffle_order: tuple[int, ...] | None


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

class FewShotModel(Module):
    """Backbone plus (optionally) the view integrator and the projection head.

    Components draw their initial weights from separate streams, so every
    ablation variant built with the same seed shares the same backbone
    initialization.
    """

    def __init__(self, backbone_config: BackboneConfig, cpl: CplConfig, seed: int = 0, dtype=np.float32,
                 augmentations: Sequence[str] = DEFAULT_AUGMENTATIONS):
        super().__init__()
        self.cpl = cpl
        self.augmentations = tuple(augmentations)
        self.dtype = np.dtype(dtype)
        self.backbone = Backbone(backbone_config, ad.make_rng(seed, 0, 0), dtype)
        self._children["backbone"] = self.backbone
        views = 1 + len(self.augmentations)
        dim = backbone_config.embedding_dim
        self.integrator = None
        self.projection = None
        if cpl.use_ae:
            self.integrator = AttentionIntegrator(dim, ad.make_rng(seed, 0, 1), dtype, tokens=views,
                                                  residual=cpl.attention_residual)
            self._children["integrator"] = self.integrator
        if cpl.uses_cpl and cpl.use_projection:
            in_dim = dim * views if cpl.use_ae else dim
            self.projection = ProjectionHead(in_dim, ad.make_rng(seed, 0, 2), dtype,
                                             hidden_dim=cpl.projection_hidden, out_dim=cpl.projection_out)
            if not cpl.project_anchor and self.projection.out_dim != in_dim:
                raise ConfigError(
                    f"projection_out={self.projection.out_dim} must equal the embedding width {in_dim} "
                    "when the anchor is not projected"
                )
            self._children["projection"] = self.projection
        for name, p in self.named_parameters():
            p.name = name

    @property
    def views(self) -> int:
        return 1 + len(self.augmentations) if self.cpl.use_ae else 1

    def embed_images(self, images: np.ndarray, training: bool) -> Tensor:
        """Embed a batch of images: (N, V*D) augmented embeddings, or (N, D) without views."""
        tokens = self.tokens(images, training)
        return ad.concat([tokens[:, j] for j in range(tokens.shape[1])], axis=1)

    def tokens(self, images: np.ndarray, training: bool) -> Tensor:
        """Post-integration view tokens (N, V, D); V = 1 when views are disabled."""
        n = len(images)
        if not self.cpl.use_ae:
            emb = self.backbone(images, training)
            return emb.reshape(n, 1, emb.shape[1])
        batch = np.concatenate([images] + [augment(a, images) for a in self.augmentations], axis=0)
        emb = self.backbone(batch.astype(self.dtype, copy=False), training)
        per_view = emb.reshape(self.views, n, emb.shape[1])
        return self.integrator(ad.transpose(per_view, (1, 0, 2)))


def shuffle_permutation(views: int, mode: str = "fixed", rng: np.random.Generator | None = None) -> tuple[int, ...]:
    """Block order for the shuffled embedding; the original view always stays first."""
    if views < 2:
        return (0,)
    if mode == "fixed":
        return (0, *range(2, views), 1)
    if rng is None:
        raise ContractError("random shuffle needs an rng")
    return (0, *(1 + rng.permutation(views - 1)))


def embed_episode(model: FewShotModel, episode: Episode, training: bool = True, rng: np.random.Generator | None = None,
                  shuffled: bool = True) -> EpisodeEmbedding:
    """Embed support and query sets through one shared backbone pass.

    Query embeddings come in two concatenation orders built from the same
    post-attention tokens: the natural order and, when ``shuffled``, the
    permuted order used only by the contrastive loss.
    """
    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    tokens = model.tokens(images, training)
    V = tokens.shape[1]
    ns = len(episode.support_images)
    order = tuple(range(V))
    ordered = ad.concat([tokens[:, j] for j in order], axis=1)
    support = ordered[:ns]
    query = ordered[ns:]
    query_shuffled, perm = None, None
    if shuffled and V > 1:
        perm = shuffle_permutation(V, model.cpl.shuffle_mode, rng)
        qtok = tokens[ns:]
        query_shuffled = ad.concat([qtok[:, j] for j in perm], axis=1)
    return EpisodeEmbedding(support, query, query_shuffled, perm)


# ---------------------------------------------------------------------------
# prototypes, losses, classification
# ---------------------------------------------------------------------------

def compute_prototypes(support: Tensor, labels: np.ndarray, n: int, k: int) -> Tensor:
    """Per-class mean of the support embeddings, rows ordered by class id 0..n-1."""
    labels = np.asarray(labels)
    rows = []
    for c in range(n):
        idx = np.flatnonzero(labels == c)
        if len(idx) != k:
            raise ContractError(f"class {c} has {len(idx)} support samples, expected {k}")
        rows.append(support[idx].mean(axis=0, keepdims=True))
    return ad.concat(rows, axis=0)


def _distances(query: Tensor, prototypes: Tensor, distance: str) -> Tensor:
    d2 = ad.pairwise_sqeuclidean(query, prototypes)
    if distance == "sqeuclidean":
        return d2
    return ad.sqrt(d2)


def fsl_loss(query: Tensor, prototypes: Tensor, labels: np.ndarray, normalization: str = "mean",
             distance: str = "sqeuclidean", q: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy of the softmax over negative distances to prototypes.

    Returns the loss and the per-query posterior matrix.  ``normalization``
    ``mean`` averages over all queries; ``literal`` sums and divides by q.
    """
    labels = np.asarray(labels)
    if labels.max() >= prototypes.shape[0]:
        raise ContractError("a query label has no prototype")
    logp = ad.log_softmax(-_distances(query, prototypes, distance), axis=1)
    picked = logp[np.arange(len(labels)), labels]
    if normalization == "mean":
        loss = -picked.mean()
    elif normalization == "literal":
        if q is None:
            raise ContractError("literal normalization needs q")
        loss = -picked.sum() * (1.0 / q)
    else:
        raise ConfigError(f"unknown normalization {normalization!r}")
    return loss, np.exp(logp.data)


def draw_negatives(pos_labels: np.ndarray, query_labels: np.ndarray, n: int, m: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Negative query indices for every (anchor, positive) pair.

    Row r belongs to the pair whose positive has label ``pos_labels[r]``.
    Draw order: one block ``rng.random((P, n-1, q))`` of uniforms; for row
    r and the j-th other class (ascending class id) the m negatives are the
    first m entries of ``argsort`` of its q uniforms, mapped to that class's
    queries in query order.  Returns an int array (P, m*(n-1)).
    """
    query_labels = np.asarray(query_labels)
    members = [np.flatnonzero(query_labels == c) for c in range(n)]
    q = min(len(mb) for mb in members)
    if any(len(mb) != q for mb in members):
        raise ContractError("every class needs the same number of queries")
    if m > q:
        raise ConfigError(f"negatives_per_class={m} exceeds q={q}")
    P = len(pos_labels)
    u = rng.random((P, n - 1, q))
    local = np.argsort(u, axis=-1, kind="stable")[..., :m]
    member_table = np.stack(members)  # (n, q)
    others = np.array([[c2 for c2 in range(n) if c2 != c] for c in range(n)])  # (n, n-1)
    cls = others[np.asarray(pos_labels)]  # (P, n-1)
    return member_table[cls[..., None], local].reshape(P, (n - 1) * m)


def cpl_loss(prototypes: Tensor, query: Tensor, query_labels: np.ndarray, config: CplConfig,
             projection: ProjectionHead | None, rng: np.random.Generator, support: Tensor | None = None,
             support_labels: np.ndarray | None = None) -> Tensor:
    """Prototype-anchored supervised contrastive loss.

    For every anchor of class c and every class-c query i the term is
    ``-log(sp / (sp + sn))`` with ``sp = exp(cos(anchor, h(query_i)) / T)``
    and ``sn`` summed over m queries from each other class, drawn without
    replacement per positive.  Terms are averaged.
    """
    query_labels = np.asarray(query_labels)
    n = prototypes.shape[0]
    m = config.negatives_per_class
    if config.anchor_mode == "prototype":
        anchors = prototypes
        anchor_labels = np.arange(n)
    elif config.anchor_mode == "support_sample":
        if support is None or support_labels is None:
            raise ContractError("support_sample anchors need the support embeddings")
        anchors = support
        anchor_labels = np.asarray(support_labels)
    else:
        raise ConfigError(f"unknown anchor_mode {config.anchor_mode!r}")

    z = projection(query) if (config.use_projection and projection is not None) else query
    if config.use_projection and projection is not None and config.project_anchor:
        anchors = projection(anchors)
    if anchors.shape[1] != z.shape[1]:
        raise DimensionError(f"anchor dim {anchors.shape[1]} != projected query dim {z.shape[1]}")

    pair_anchor, pair_pos = [], []
    for a, c in enumerate(anchor_labels):
        pos = np.flatnonzero(query_labels == c)
        pair_anchor.append(np.full(len(pos), a))
        pair_pos.append(pos)
    pair_anchor = np.concatenate(pair_anchor)
    pair_pos = np.concatenate(pair_pos)
    neg = draw_negatives(query_labels[pair_pos], query_labels, n, m, rng)

    cos = ad.pairwise_cosine(anchors, z, eps=COSINE_EPS)  # (A, nq)
    cols = np.concatenate([pair_pos[:, None], neg], axis=1)
    logits = cos[pair_anchor[:, None], cols] * (1.0 / config.temperature)
    return -(ad.log_softmax(logits, axis=1)[:, 0]).mean()


def total_loss(l_fsl, l_cpl, lam: float):
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    return l_fsl + lam * l_cpl


def classify_queries(query, prototypes) -> np.ndarray:
    """Nearest prototype by squared Euclidean distance; ties go to the lowest class index."""
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    p = prototypes.data if isinstance(prototypes, Tensor) else np.asarray(prototypes)
    d = ((q[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def episode_loss(model: FewShotModel, episode: Episode, rng: np.random.Generator,
                 training: bool = True) -> tuple[Tensor, LossBreakdown]:
    """Forward pass of one training episode; returns the total-loss tensor and its breakdown."""
    cfg = model.cpl
    use_cpl = cfg.uses_cpl
    emb = embed_episode(model, episode, training, rng, shuffled=use_cpl and cfg.shuffle_queries)
    protos = compute_prototypes(emb.support, episode.support_labels, episode.n, episode.k)
    l_fsl, post = fsl_loss(emb.query, protos, episode.query_labels, cfg.fsl_normalization, cfg.distance, episode.q)
    if use_cpl:
        cfg.validate(episode.q)
        queries = emb.query_shuffled if emb.query_shuffled is not None else emb.query
        l_cpl = cpl_loss(protos, queries, episode.query_labels, cfg, model.projection, rng,
                         emb.support, episode.support_labels)
        l_tot = total_loss(l_fsl, l_cpl, cfg.lam)
        l_cpl_v = float(l_cpl.data)
    else:
        l_tot = l_fsl
        l_cpl_v = 0.0
    l_fsl_v = float(l_fsl.data)
    # reported total is composed in float64 from the reported parts
    return l_tot, LossBreakdown(l_fsl_v, l_cpl_v, l_fsl_v + cfg.lam * l_cpl_v if use_cpl else l_fsl_v, post)
