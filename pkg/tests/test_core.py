import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cplae import autodiff as ad
from cplae.autodiff import ContractError, Tensor, grad_check, make_rng
from cplae.core import (
    PRESETS,
    ConfigError,
    CplConfig,
    FewShotModel,
    apply_preset,
    classify_queries,
    compute_prototypes,
    cpl_loss,
    draw_negatives,
    embed_episode,
    episode_loss,
    fsl_loss,
    shuffle_permutation,
    total_loss,
)
from cplae.data import EpisodeConfig, augment, sample_episode, synth_generate
from cplae.nn import BackboneConfig, ProjectionHead

from oracles import oracle_cpl, oracle_fsl


def random_problem(rng, n, q, d):
    query = rng.normal(size=(n * q, d))
    protos = rng.normal(size=(n, d))
    labels = np.repeat(np.arange(n), q)
    return query, protos, labels


# ---------------------------------------------------------------------------
# closed-form values
# ---------------------------------------------------------------------------

class TestClosedForm:
    def test_uniform_fsl_is_ln5(self):
        # every query equidistant from all five prototypes
        protos = Tensor(np.eye(5))
        query = Tensor(np.full((10, 5), 0.2))
        loss, post = fsl_loss(query, protos, np.repeat(np.arange(5), 2))
        assert abs(loss.item() - math.log(5)) < 1e-9
        np.testing.assert_allclose(post, 0.2, atol=1e-12)

    def test_fsl_two_class_value(self):
        # d = (0, 2): -log(e^0 / (e^0 + e^-2)) = log(1 + e^-2)
        loss, _ = fsl_loss(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0], [1.0, 1.0]]), np.array([0]))
        assert abs(loss.item() - math.log(1 + math.exp(-2))) < 1e-12

    def test_cpl_opposite_negatives(self):
        # two classes on opposite rays: anchor-positive cos 1, anchor-negative cos -1
        n, q, m = 2, 24, 24
        labels = np.repeat(np.arange(n), q)
        protos = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        z = Tensor(np.where(labels[:, None] == 0, 1.0, -1.0) * np.array([[1.0, 0.0]]))
        cfg = CplConfig(negatives_per_class=m, use_projection=False)
        loss = cpl_loss(protos, z, labels, cfg, None, make_rng(0))
        assert abs(loss.item() - math.log(1 + 24 * math.exp(-2))) < 1e-12

    def test_equal_similarity_cpl_is_ln25(self):
        n, q, m = 5, 15, 6
        z = Tensor(np.ones((n * q, 4)))
        protos = Tensor(np.ones((n, 4)) * 3.0)
        cfg = CplConfig(temperature=1.0, negatives_per_class=m, use_projection=False)
        loss = cpl_loss(protos, z, np.repeat(np.arange(n), q), cfg, None, make_rng(0))
        assert abs(loss.item() - math.log(25)) < 1e-9

    def test_cpl_zero_projection_is_finite(self):
        # a query mapped to the zero vector has cosine 0 with every anchor
        labels = np.repeat(np.arange(2), 2)
        z = Tensor(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), requires_grad=True)
        cfg = CplConfig(negatives_per_class=2, use_projection=False)
        loss = cpl_loss(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), z, labels, cfg, None, make_rng(0))
        loss.backward()
        assert np.isfinite(loss.item()) and np.isfinite(z.grad).all()

    def test_total_loss_composition(self):
        assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2, abs=1e-15)
        assert total_loss(1.0, 2.0, 0.0) == 1.0

    def test_total_loss_negative_lambda(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 2.0, -0.1)


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------

class TestOracles:
    @pytest.mark.parametrize("normalization", ["mean", "literal"])
    def test_fsl_matches_oracle(self, normalization):
        rng = make_rng(10)
        for _ in range(50):
            n, q, d = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
            query, protos, labels = random_problem(rng, n, q, d)
            loss, _ = fsl_loss(Tensor(query), Tensor(protos), labels, normalization, q=q)
            assert abs(loss.item() - oracle_fsl(query, protos, labels, normalization, q)) < 1e-10

    def test_fsl_euclidean_variant(self):
        query, protos, labels = random_problem(make_rng(1), 3, 2, 4)
        loss, _ = fsl_loss(Tensor(query), Tensor(protos), labels, distance="euclidean")
        d = np.sqrt(((query[:, None] - protos[None]) ** 2).sum(-1))
        ref = -np.mean([-d[i, labels[i]] - np.log(np.exp(-d[i]).sum()) for i in range(len(query))])
        assert abs(loss.item() - ref) < 1e-12

    def test_cpl_matches_oracle(self):
        rng = make_rng(11)
        for trial in range(50):
            n, q, d = int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 6))
            m = int(rng.integers(1, q + 1))
            T = float(rng.uniform(0.2, 2.0))
            query, protos, labels = random_problem(rng, n, q, d)
            cfg = CplConfig(temperature=T, negatives_per_class=m, use_projection=False)
            loss = cpl_loss(Tensor(protos), Tensor(query), labels, cfg, None, make_rng(trial, 99))
            ref = oracle_cpl(protos, list(range(n)), query, labels, n, m, T, (trial, 99))
            assert abs(loss.item() - ref) < 1e-10

    def test_cpl_with_projection_matches_oracle(self):
        rng = make_rng(12)
        for trial in range(10):
            n, q, d = 3, 4, 5
            query, protos, labels = random_problem(rng, n, q, d)
            head = ProjectionHead(d, make_rng(trial), np.float64)
            cfg = CplConfig(negatives_per_class=3)
            loss = cpl_loss(Tensor(protos), Tensor(query), labels, cfg, head, make_rng(trial, 7))
            z = head(Tensor(query)).data
            assert abs(loss.item() - oracle_cpl(protos, list(range(n)), z, labels, n, 3, 1.0, (trial, 7))) < 1e-10

    def test_cpl_support_sample_anchor(self):
        rng = make_rng(13)
        n, k, q, d = 3, 2, 4, 5
        query, _, labels = random_problem(rng, n, q, d)
        support = rng.normal(size=(n * k, d))
        s_labels = np.repeat(np.arange(n), k)
        cfg = CplConfig(negatives_per_class=2, anchor_mode="support_sample", use_projection=False)
        loss = cpl_loss(Tensor(np.zeros((n, d))), Tensor(query), labels, cfg, None, make_rng(5),
                        support=Tensor(support), support_labels=s_labels)
        ref = oracle_cpl(support, list(s_labels), query, labels, n, 2, 1.0, (5,))
        assert abs(loss.item() - ref) < 1e-10


class TestNegatives:
    @given(st.integers(2, 6), st.integers(1, 8), st.data())
    @settings(max_examples=100, deadline=None)
    def test_structure(self, n, q, data):
        m = data.draw(st.integers(1, q))
        labels = np.repeat(np.arange(n), q)
        pos = np.tile(np.arange(n), 2)
        neg = draw_negatives(pos, labels, n, m, make_rng(data.draw(st.integers(0, 1000))))
        assert neg.shape == (len(pos), m * (n - 1))
        for r, c in enumerate(pos):
            got = labels[neg[r]]
            assert c not in got
            assert (np.bincount(got, minlength=n)[np.arange(n) != c] == m).all()
            assert len(set(neg[r])) == len(neg[r])

    def test_m_exceeds_q(self):
        with pytest.raises(ConfigError):
            draw_negatives(np.array([0]), np.repeat(np.arange(3), 2), 3, 3, make_rng(0))

    def test_config_rejects_m_over_q(self):
        with pytest.raises(ConfigError):
            CplConfig(negatives_per_class=16).validate(q=15)


class TestPrototypes:
    def test_means(self):
        s = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 0.0], [6.0, 2.0]])
        p = compute_prototypes(Tensor(s), np.array([0, 0, 1, 1]), 2, 2)
        assert p.data.tolist() == [[1.0, 1.0], [5.0, 1.0]]

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = make_rng(seed)
        s = rng.normal(size=(12, 3))
        labels = np.repeat(np.arange(3), 4)
        perm = rng.permutation(12)
        a = compute_prototypes(Tensor(s), labels, 3, 4).data
        b = compute_prototypes(Tensor(s[perm]), labels[perm], 3, 4).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_wrong_count(self):
        with pytest.raises(ContractError):
            compute_prototypes(Tensor(np.zeros((3, 2))), np.array([0, 0, 1]), 2, 2)


class TestClassify:
    def test_nearest(self):
        assert classify_queries(np.array([[0.9, 0.0]]), np.array([[0.0, 0.0], [1.0, 0.0]])).tolist() == [1]

    def test_tie_lowest_index(self):
        assert classify_queries(np.array([[0.5]]), np.array([[0.0], [1.0]])).tolist() == [0]

    def test_matches_fsl_argmax(self):
        query, protos, labels = random_problem(make_rng(4), 4, 5, 3)
        _, post = fsl_loss(Tensor(query), Tensor(protos), labels)
        assert (classify_queries(query, protos) == post.argmax(axis=1)).all()


class TestPresetsAndConfig:
    def test_presets(self):
        base = CplConfig()
        assert apply_preset(base, "protonet").use_ae is False and apply_preset(base, "protonet").lam == 0
        assert apply_preset(base, "protonet_ae").use_ae and apply_preset(base, "protonet_ae").lam == 0
        assert apply_preset(base, "cplae_noshuffle").shuffle_queries is False
        assert apply_preset(base, "cplae") == base

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            apply_preset(CplConfig(), "simclr")

    @pytest.mark.parametrize("kw", [dict(temperature=0), dict(lam=-1), dict(anchor_mode="x"), dict(distance="l1")])
    def test_validate(self, kw):
        with pytest.raises(ConfigError):
            CplConfig(**kw).validate()

    def test_defaults(self):
        c = CplConfig()
        assert (c.temperature, c.negatives_per_class, c.lam) == (1.0, 6, 0.1)

    def test_shuffle_orders(self):
        assert shuffle_permutation(4) == (0, 2, 3, 1)
        assert shuffle_permutation(1) == (0,)
        for s in range(20):
            p = shuffle_permutation(4, "random", make_rng(s))
            assert p[0] == 0 and sorted(p) == [0, 1, 2, 3]

    def test_projection_width_must_match(self):
        with pytest.raises(ConfigError):
            FewShotModel(BackboneConfig(1, 8, [3, 3]), CplConfig(projection_out=5))
        FewShotModel(BackboneConfig(1, 8, [3, 3]), CplConfig(projection_out=5, project_anchor=True))


# ---------------------------------------------------------------------------
# model-level behaviour
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    ds = synth_generate(6, 8, 8, seed=1)
    ep = sample_episode(ds, EpisodeConfig(2, 2, 3), make_rng(0))
    return ds, ep


@pytest.fixture(scope="module")
def smooth_toy(toy):
    # synthetic images have flat zero regions that put pre-activations exactly on relu kinks;
    # finite differences need a point where the loss is differentiable
    _, ep = toy
    rng = make_rng(9)
    return replace(ep, support_images=rng.normal(size=ep.support_images.shape),
                   query_images=rng.normal(size=ep.query_images.shape))


def make_model(preset="cplae", dtype=np.float64, bn=True, **kw):
    cpl = apply_preset(CplConfig(negatives_per_class=2, **kw), preset)
    return FewShotModel(BackboneConfig(1, 8, [3, 3], use_batchnorm=bn), cpl, seed=0, dtype=dtype)


class TestModel:
    def test_embedding_shapes(self, toy):
        _, ep = toy
        emb = embed_episode(make_model(), ep, rng=make_rng(0))
        assert emb.support.shape == (4, 12) and emb.query.shape == (6, 12)
        assert emb.query_shuffled.shape == (6, 12) and emb.shuffle_order == (0, 2, 3, 1)

    def test_shuffled_is_block_permutation(self, toy):
        _, ep = toy
        emb = embed_episode(make_model(), ep, training=False, rng=make_rng(0))
        blocks = emb.query.data.reshape(6, 4, 3)
        np.testing.assert_array_equal(emb.query_shuffled.data.reshape(6, 4, 3), blocks[:, [0, 2, 3, 1]])

    def test_views_come_from_augmentations(self, toy):
        # with a zero attention value path the tokens are the raw backbone embeddings
        _, ep = toy
        model = make_model()
        dict(model.named_parameters())["integrator.w_v"].data[...] = 0
        imgs = ep.query_images
        tok = model.tokens(imgs, training=False).data
        for j, kind in enumerate(model.augmentations, start=1):
            ref = model.backbone(augment(kind, imgs).astype(np.float64), training=False).data
            np.testing.assert_allclose(tok[:, j], ref, atol=1e-12)

    def test_protonet_plain_width(self, toy):
        _, ep = toy
        emb = embed_episode(make_model("protonet"), ep, rng=make_rng(0))
        assert emb.support.shape == (4, 3) and emb.query_shuffled is None

    def test_breakdown_total_exact(self, toy):
        _, ep = toy
        loss, b = episode_loss(make_model(), ep, make_rng(3))
        assert b.l_total == b.l_fsl + 0.1 * b.l_cpl
        assert abs(loss.item() - b.l_total) < 1e-12

    def test_protonet_loss_has_no_cpl(self, toy):
        _, ep = toy
        loss, b = episode_loss(make_model("protonet"), ep, make_rng(3))
        assert b.l_cpl == 0.0 and b.l_total == b.l_fsl

    def test_same_seed_same_init_across_presets(self):
        a = make_model("protonet").backbone.state_dict()
        b = make_model("cplae").backbone.state_dict()
        for k in a:
            assert np.array_equal(a[k], b[k])

    @pytest.mark.parametrize("which", ["fsl", "cpl", "total"])
    def test_loss_gradients_all_groups(self, smooth_toy, which):
        ep = smooth_toy
        model = make_model(bn=False)

        def f():
            loss, _ = episode_loss(model, ep, make_rng(7), training=True)
            if which == "total":
                return loss
            emb = embed_episode(model, ep, True, make_rng(7))
            protos = compute_prototypes(emb.support, ep.support_labels, ep.n, ep.k)
            if which == "fsl":
                return fsl_loss(emb.query, protos, ep.query_labels)[0]
            return cpl_loss(protos, emb.query_shuffled, ep.query_labels, model.cpl, model.projection, make_rng(7))

        params = model.parameters()
        groups = {name.split(".")[0] for name, _ in model.named_parameters()}
        assert groups == {"backbone", "integrator", "projection"}
        rep = grad_check(f, params, tol=1e-4)
        assert rep.passed, rep
