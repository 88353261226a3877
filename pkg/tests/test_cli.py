import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from aftn.cli import load_config, main
from aftn.data import parse_annotations
from aftn.numerics import ConfigError

MICRO_CFG = {
    "fen": {"channels": [2, 2, 2, 2, 2], "frozen": False},
    "head": {"fuse_kernels": 4, "fc_units": 8},
    "optim": {"learning_rate": 1e-3},
    "train": {"epochs": 1, "batch": 2, "seed": 3},
    "data": {"mean_length": 8, "distractors": 1, "occluder_prob": 0.0, "seed": 5},
}


def tree_hash(root):
    h = hashlib.sha256()
    for f in sorted(Path(root).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def kv_lines(text):
    out = {}
    for line in text.strip().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(MICRO_CFG))
    assert main(["gen", "--config", str(cfg_path), "--out", str(root / "data"),
                 "--n", "3", "--seed", "5"]) == 0
    model_path = root / "model.aftn"
    assert main(["train", "--config", str(cfg_path), "--data", str(root / "data/manifest.txt"),
                 "--out", str(model_path)]) == 0
    return root, cfg_path, model_path


class TestConfig:
    def test_defaults_follow_documented_values(self):
        cfg = load_config(None)
        assert cfg["train"] == {"epochs": 10, "batch": 50, "seed": 0}
        assert cfg["optim"]["learning_rate"] == 1e-5
        assert cfg["optim"]["weight_decay"] == 1e-3
        assert cfg["fen"]["channels"] == [4, 8, 16, 16, 16]
        assert cfg["variant"] == "aftn"

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"train": {"warmup": 5}}')
        with pytest.raises(ConfigError):
            load_config(p)

    def test_invalid_json_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_variant_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"variant": "super"}')
        with pytest.raises(ConfigError):
            load_config(p)


class TestGen:
    def test_deterministic_trees(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(MICRO_CFG))
        for sub in ("a", "b"):
            assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / sub),
                         "--n", "2", "--seed", "7"]) == 0
        ha = tree_hash(tmp_path / "a")
        hb = tree_hash(tmp_path / "b")
        assert ha == hb

    def test_manifest_and_config_echo(self, workdir):
        root, _, _ = workdir
        manifest = (root / "data/manifest.txt").read_text().strip().splitlines()
        assert len(manifest) == 3
        echo = json.loads((root / "data/effective_config.json").read_text())
        assert echo["data"]["seed"] == 5

    def test_missing_out_is_usage_error(self):
        assert main(["gen", "--n", "2"]) == 2

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"data": {"bogus": 1}}')
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_model_written_and_report_printed(self, workdir, capsys):
        root, cfg_path, model_path = workdir
        assert model_path.exists()
        out = root / "model2.aftn"
        assert main(["train", "--config", str(cfg_path),
                     "--data", str(root / "data/manifest.txt"), "--out", str(out)]) == 0
        lines = kv_lines(capsys.readouterr().out)
        assert "epoch" in lines or "model" in lines
        assert lines["model"] == str(out)

    def test_single_stream_variant(self, workdir, capsys):
        root, cfg_path, _ = workdir
        out = root / "model_c.aftn"
        code = main(["train", "--config", str(cfg_path), "--variant", "aftn-c",
                     "--data", str(root / "data/manifest.txt"), "--out", str(out)])
        assert code == 0 and out.exists()
        from aftn.network import load_model

        assert load_model(out).variant == "aftn-c"

    def test_numeric_blowup_exit_3(self, workdir, tmp_path, capsys):
        root, _, _ = workdir
        cfg = dict(MICRO_CFG)
        cfg["optim"] = {"learning_rate": 1e200}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        code = main(["train", "--config", str(p), "--data", str(root / "data/manifest.txt"),
                     "--out", str(tmp_path / "m.aftn")])
        assert code == 3
        assert "step" in capsys.readouterr().err


class TestEval:
    def test_oracle_scores_one(self, workdir, tmp_path, capsys):
        root, cfg_path, _ = workdir
        code = main(["eval", "--config", str(cfg_path), "--oracle",
                     "--data", str(root / "data/manifest.txt"), "--out", str(tmp_path / "run")])
        assert code == 0
        lines = kv_lines(capsys.readouterr().out)
        assert float(lines["overall"]) == 1.0
        assert float(lines["accuracy"]) == 1.0
        assert float(lines["robustness"]) == 1.0

    def test_model_eval_writes_artifacts(self, workdir, tmp_path, capsys):
        root, cfg_path, model_path = workdir
        out = tmp_path / "run"
        code = main(["eval", "--config", str(cfg_path), "--model", str(model_path),
                     "--data", str(root / "data/manifest.txt"), "--out", str(out)])
        assert code == 0
        lines = kv_lines(capsys.readouterr().out)
        assert 0.0 <= float(lines["accuracy"]) <= 1.0
        for name in ("tp_rot.csv", "fr_rt.csv", "tp_rot.svg", "fr_rt.svg",
                     "scores.json", "effective_config.json"):
            assert (out / name).exists(), name

    def test_variant_mismatch_exit_2(self, workdir, tmp_path):
        root, cfg_path, model_path = workdir
        assert main(["eval", "--config", str(cfg_path), "--model", str(model_path),
                     "--variant", "baseline",
                     "--data", str(root / "data/manifest.txt"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_model_required_without_oracle(self, workdir, tmp_path):
        root, cfg_path, _ = workdir
        assert main(["eval", "--config", str(cfg_path),
                     "--data", str(root / "data/manifest.txt"),
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_manifest_exit_4(self, workdir, tmp_path):
        root, cfg_path, model_path = workdir
        assert main(["eval", "--config", str(cfg_path), "--model", str(model_path),
                     "--data", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "x")]) == 4


class TestTrackBenchPlot:
    def test_track_output_parses(self, workdir, tmp_path, capsys):
        root, _, model_path = workdir
        seq_dir = (root / "data/manifest.txt").read_text().splitlines()[0]
        out = tmp_path / "pred.csv"
        code = main(["track", "--model", str(model_path),
                     "--sequence", str(root / "data" / seq_dir), "--out", str(out)])
        assert code == 0
        boxes = parse_annotations(out)
        assert len(boxes) >= 2

    def test_bench_prints_fps_and_reference(self, workdir, capsys):
        root, _, model_path = workdir
        code = main(["bench", "--model", str(model_path),
                     "--data", str(root / "data/manifest.txt")])
        assert code == 0
        lines = kv_lines(capsys.readouterr().out)
        assert float(lines["fps"]) > 0
        assert float(lines["realtime_reference_fps"]) == 25.0

    def test_plot_is_bit_stable(self, workdir, tmp_path, capsys):
        root, cfg_path, _ = workdir
        out = tmp_path / "run"
        main(["eval", "--config", str(cfg_path), "--oracle",
              "--data", str(root / "data/manifest.txt"), "--out", str(out)])
        capsys.readouterr()
        svg = (out / "tp_rot.svg").read_bytes()
        (out / "tp_rot.svg").unlink()
        assert main(["plot", "--run", str(out)]) == 0
        assert (out / "tp_rot.svg").read_bytes() == svg
        assert main(["plot", "--run", str(out)]) == 0
        assert (out / "tp_rot.svg").read_bytes() == svg

    def test_plot_without_curves_exit_2(self, tmp_path):
        assert main(["plot", "--run", str(tmp_path)]) == 2
