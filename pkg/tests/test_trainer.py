import csv
import json
import math

import numpy as np
import pytest

from cplae.autodiff import make_rng
from cplae.config import ConfigFileError, RunConfig
from cplae.core import episode_loss
from cplae.data import sample_episode, synth_generate
from cplae.nn import load_checkpoint
from cplae.trainer import (
    CSV_FIELDS,
    TrainingError,
    build_model,
    pretrain_backbone,
    run_training,
    train_step,
    validation_accuracy,
    write_run_outputs,
)


@pytest.fixture(scope="module")
def cfg(tiny_config):
    return tiny_config()


@pytest.fixture(scope="module")
def dataset(cfg):
    return cfg.load_data()


class TestRunTraining:
    def test_log_shape(self, cfg, dataset):
        res = run_training(cfg, dataset)
        assert len(res.log.rows) == 6 and len(res.log.epochs) == 2
        assert [r["episode"] for r in res.log.rows] == list(range(6))
        assert res.log.best_epoch in (0, 1)
        for r in res.log.rows:
            assert r["l_total"] == r["l_fsl"] + 0.1 * r["l_cpl"]
            assert r["val_acc"] is not None

    def test_parameters_change(self, cfg, dataset):
        model = build_model(cfg, dataset)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        run_training(cfg, dataset, model=model)
        after = model.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_best_state_is_snapshot(self, cfg, dataset):
        res = run_training(cfg, dataset)
        state = res.best_state
        res.model.parameters()[0].data += 1.0
        assert not np.array_equal(state["backbone.conv0.weight"], res.model.state_dict()["backbone.conv0.weight"])

    def test_lr_schedule_applied(self, dataset, tiny_config):
        cfg = tiny_config(epochs=3)
        cfg.optimizer.lr_step = 1
        res = run_training(cfg, dataset)
        assert [e["lr"] for e in res.log.epochs] == [1e-3, 5e-4, 2.5e-4]

    def test_preset_changes_losses(self, cfg, dataset):
        res = run_training(cfg, dataset, preset="protonet")
        assert all(r["l_cpl"] == 0.0 and r["l_total"] == r["l_fsl"] for r in res.log.rows)

    def test_no_val_split_last_epoch_wins(self, dataset, tiny_config):
        cfg = tiny_config(val_episodes=0)
        res = run_training(cfg, dataset)
        assert res.log.best_epoch == 1 and res.log.best_val_acc is None

    def test_seeded_runs_identical(self, dataset, tiny_config):
        cfg = tiny_config()
        cfg.backbone.use_batchnorm = False
        a = run_training(cfg, dataset).log.rows
        b = run_training(cfg, dataset).log.rows
        assert a == b


class TestTrainStep:
    def test_non_finite_loss_aborts(self, cfg, dataset):
        model = build_model(cfg, dataset)
        model.parameters()[0].data[...] = np.nan
        ep = sample_episode(dataset, cfg.episode_config(), make_rng(0))
        from cplae.nn import make_optimizer

        with pytest.raises(TrainingError, match="episode seed"):
            train_step(model, make_optimizer("adam", model.parameters(), 1e-3), ep, make_rng(1), (0, 0, 0))

    def test_step_reduces_loss_on_same_episode(self, cfg, dataset):
        from cplae.nn import make_optimizer

        model = build_model(cfg, dataset)
        ep = sample_episode(dataset, cfg.episode_config(), make_rng(0))
        opt = make_optimizer("sgd_nesterov", model.parameters(), 0.05)
        first = train_step(model, opt, ep, make_rng(1)).l_total
        for _ in range(10):
            last = train_step(model, opt, ep, make_rng(1)).l_total
        assert last < first


class TestValidation:
    def test_value_range(self, cfg, dataset):
        acc = validation_accuracy(build_model(cfg, dataset), dataset, cfg)
        assert 0.0 <= acc <= 1.0

    def test_too_few_val_classes(self, tiny_config):
        cfg = tiny_config()
        ds = synth_generate(15, 10, 8, seed=0, split_counts=(13, 2, 0))
        assert validation_accuracy(build_model(cfg, ds), ds, cfg) is None


def test_pretrain_runs(dataset, tiny_config):
    cfg = tiny_config(pretrain=True, pretrain_epochs=2, pretrain_batch=16)
    acc = pretrain_backbone(build_model(cfg, dataset), dataset, cfg)
    assert 0.0 <= acc <= 1.0
    res = run_training(cfg, dataset)
    assert res.log.pretrain_accuracy is not None


def test_write_outputs(tmp_path, cfg, dataset):
    res = run_training(cfg, dataset)
    paths = write_run_outputs(res, cfg, tmp_path)
    state = load_checkpoint(paths["checkpoint"])
    assert set(state) == set(res.best_state)
    with open(paths["runlog"]) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 6
    assert float(rows[0]["l_fsl"]) == res.log.rows[0]["l_fsl"]
    summary = json.loads(paths["summary"].read_text())
    assert summary["best_epoch"] == res.log.best_epoch and summary["config"]["train"]["epochs"] == 2


class TestConfig:
    def test_defaults_follow_published_setup(self):
        cfg = RunConfig()
        assert cfg.optimizer.lr == 1e-4 and cfg.optimizer.lr_step == 20 and cfg.optimizer.lr_factor == 0.5
        assert (cfg.cplae.temperature, cfg.cplae.negatives_per_class, cfg.cplae.lam) == (1.0, 6, 0.1)
        assert (cfg.data.ways, cfg.data.shots, cfg.data.queries) == (5, 5, 15)

    def test_roundtrip(self, tiny_config):
        cfg = tiny_config()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("doc,field", [
        ({"bogus": {}}, "bogus"),
        ({"train": {"epochz": 1}}, "epochz"),
        ({"train": {"preset": "x"}}, "train.preset"),
        ({"optimizer": {"kind": "rmsprop"}}, "optimizer.kind"),
        ({"cplae": {"negatives_per_class": 20}}, "negatives_per_class"),
    ])
    def test_errors_name_the_field(self, doc, field):
        with pytest.raises(ConfigFileError, match=field):
            RunConfig.from_dict(doc)

    def test_load_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigFileError):
            RunConfig.load(tmp_path / "c.json")

    def test_backbone_from_data(self, cfg, dataset):
        bc = cfg.backbone_config(dataset)
        assert (bc.in_channels, bc.image_size) == (1, 8)

    def test_loss_is_finite_on_fresh_model(self, cfg, dataset):
        model = build_model(cfg, dataset)
        ep = sample_episode(dataset, cfg.episode_config(), make_rng(3))
        _, b = episode_loss(model, ep, make_rng(4))
        assert math.isfinite(b.l_total)


def test_shared_pretraining_matches_inline(dataset, tiny_config):
    from cplae.trainer import pretrained_backbone_state

    cfg = tiny_config(pretrain=True, pretrain_epochs=1, pretrain_batch=16)
    cfg.backbone.use_batchnorm = False
    inline = run_training(cfg, dataset, preset="cplae")
    shared = run_training(cfg, dataset, preset="cplae", pretrained=pretrained_backbone_state(cfg, dataset))
    assert inline.log.rows == shared.log.rows
    assert inline.log.pretrain_accuracy == shared.log.pretrain_accuracy
