"""Walk through one episode: augmented embeddings, prototypes and both losses.

Shows the shapes at every stage, the closed-form values of the two losses on
degenerate inputs, and a finite-difference check of the combined gradient.

    python3 demos/loss_walkthrough.py
"""

import math
from dataclasses import replace

import numpy as np

from cplae.autodiff import Tensor, grad_check, make_rng
from cplae.core import CplConfig, FewShotModel, compute_prototypes, cpl_loss, embed_episode, fsl_loss, total_loss
from cplae.data import EpisodeConfig, sample_episode, synth_generate
from cplae.nn import BackboneConfig

dataset = synth_generate(10, 12, 16, seed=0)
episode = sample_episode(dataset, EpisodeConfig(3, 2, 4), make_rng(0))
model = FewShotModel(BackboneConfig(1, 16, [8, 8]), CplConfig(negatives_per_class=2), seed=0, dtype=np.float64)

emb = embed_episode(model, episode, training=True, rng=make_rng(1))
print("support images", episode.support_images.shape, "-> augmented embeddings", emb.support.shape)
print("query embeddings", emb.query.shape, "shuffled views in order", emb.shuffle_order)

protos = compute_prototypes(emb.support, episode.support_labels, episode.n, episode.k)
l_fsl, logits = fsl_loss(emb.query, protos, episode.query_labels)
l_cpl = cpl_loss(protos, emb.query_shuffled, episode.query_labels, model.cpl, model.projection, make_rng(2))
print(f"prototypes {protos.shape}  L_fsl {l_fsl.item():.4f}  L_cpl {l_cpl.item():.4f}  "
      f"L_total {total_loss(l_fsl, l_cpl, 0.1).item():.4f}")

# equidistant prototypes give a uniform posterior, so L_fsl = ln n
labels = np.repeat(np.arange(5), 15)
uniform, _ = fsl_loss(Tensor(np.full((75, 5), 0.3)), Tensor(np.eye(5)), labels)
print(f"uniform posterior: L_fsl {uniform.item():.12f}  ln 5 {math.log(5):.12f}")

# equal similarities everywhere: one positive against (n-1)*m negatives, so L_cpl = ln(1 + (n-1)m)
flat = cpl_loss(Tensor(np.ones((5, 8))), Tensor(np.ones((75, 8))), labels,
                CplConfig(negatives_per_class=6, use_projection=False), None, make_rng(0))
print(f"equal similarities: L_cpl {flat.item():.12f}  ln 25 {math.log(25):.12f}")

# gradient check on small continuous-pixel images: with few units and no exact zeros,
# no relu or max-pool input lies within the finite-difference step of a kink
tiny = sample_episode(synth_generate(6, 8, 8, seed=1), EpisodeConfig(2, 2, 3), make_rng(0))
rng = make_rng(9)
smooth = replace(tiny, support_images=rng.normal(size=tiny.support_images.shape),
                 query_images=rng.normal(size=tiny.query_images.shape))
small = FewShotModel(BackboneConfig(1, 8, [3, 3], use_batchnorm=False), CplConfig(negatives_per_class=2),
                     seed=0, dtype=np.float64)


def objective():
    e = embed_episode(small, smooth, training=True, rng=make_rng(4))
    p = compute_prototypes(e.support, smooth.support_labels, smooth.n, smooth.k)
    a, _ = fsl_loss(e.query, p, smooth.query_labels)
    return total_loss(a, cpl_loss(p, e.query_shuffled, smooth.query_labels, small.cpl, small.projection, make_rng(4)), 0.1)


print(grad_check(objective, small.parameters()))
