import json

import pytest

from cplae.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture
def config_file(tmp_path, tiny_config):
    cfg = tiny_config()
    cfg.backbone.use_batchnorm = False
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


class TestSynth:
    def test_writes_manifest(self, tmp_path, capsys):
        assert main(["synth", "--classes", "10", "--per-class", "4", "--size", "16", "--seed", "7",
                     "--out", str(tmp_path / "d")]) == EXIT_OK
        lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 40
        assert "wrote 40 images" in capsys.readouterr().out

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--classes", "5", "--per-class", "3", "--size", "16", "--seed", "7", "--out", str(tmp_path / name)])
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_too_few_classes(self, tmp_path, capsys):
        assert main(["synth", "--classes", "1", "--out", str(tmp_path)]) == EXIT_USAGE
        assert "--classes" in capsys.readouterr().err


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["train", "--bogus"]) == EXIT_USAGE

    def test_bad_config_names_field(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epocs": 3}}))
        assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_USAGE
        assert "epocs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_RUNTIME


class TestTrainEval:
    def test_train_then_eval(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        for name in ("best.ckpt", "runlog.csv", "summary.json", "config.json"):
            assert (out / name).exists()
        assert main(["eval", "--config", str(config_file), "--checkpoint", str(out / "best.ckpt"),
                     "--out", str(out)]) == EXIT_OK
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("3-way 2-shot: ") and " ± " in line
        report = json.loads((out / "eval_report.json").read_text())
        assert report["episode_count"] == 4 and report["config"]["data"]["ways"] == 3

    def test_seeded_train_reproducible(self, tmp_path, config_file):
        for name in ("a", "b"):
            assert main(["train", "--config", str(config_file), "--seed", "1", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "runlog.csv").read_bytes() == (tmp_path / "b" / "runlog.csv").read_bytes()
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_config_echo_reproduces(self, tmp_path, config_file):
        main(["train", "--config", str(config_file), "--seed", "3", "--out", str(tmp_path / "a")])
        main(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "runlog.csv").read_bytes() == (tmp_path / "b" / "runlog.csv").read_bytes()

    def test_protonet_preset(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--preset", "protonet", "--out", str(tmp_path)]) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["train"]["preset"] == "protonet"
        assert "integrator" not in (tmp_path / "best.ckpt").read_bytes().decode("latin-1")

    def test_single_episode_ci_zero(self, tmp_path, config_file, capsys):
        main(["train", "--config", str(config_file), "--out", str(tmp_path)])
        assert main(["eval", "--config", str(config_file), "--checkpoint", str(tmp_path / "best.ckpt"),
                     "--episodes", "1", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.strip().endswith("± 0.00")

    def test_corrupt_checkpoint(self, tmp_path, config_file, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + bytes(8))
        assert main(["eval", "--config", str(config_file), "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_RUNTIME
        assert "magic" in capsys.readouterr().err

    def test_checkpoint_from_other_architecture(self, tmp_path, config_file, tiny_config):
        main(["train", "--config", str(config_file), "--out", str(tmp_path)])
        other = tiny_config()
        other.backbone.channels = [5, 5]
        path = tmp_path / "other.json"
        path.write_text(json.dumps(other.to_dict()))
        assert main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "best.ckpt"),
                     "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_ablate(tmp_path, tiny_config, capsys):
    cfg = tiny_config(epochs=1, episodes_per_epoch=2)
    cfg.eval.episodes = 2
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["ablate", "--config", str(path), "--seeds", "0,1", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "ablation.txt").read_text().splitlines()
    assert text[0] == "seeds: 0 1"
    rows = text[2:]
    assert [r.split()[0] for r in rows] == ["protonet", "protonet_ae", "cplae_noshuffle", "cplae"]
    assert all("±" in r for r in rows)
    assert json.loads((tmp_path / "ablation_config.json").read_text())["train"]["epochs"] == 1
