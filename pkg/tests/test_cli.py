"""The command-line front end, driven through main() with captured output."""

import json

import pytest

from selsync.cli import main
from selsync.data import load_csv
from selsync.experiment import config_to_json, config_from_json


def small_config_obj():
    return {
        "model": {"input_dim": 8, "hidden_dims": [16], "num_classes": 4, "activation": "relu"},
        "dataset": {
            "kind": "blobs",
            "num_classes": 4,
            "train_per_class": 100,
            "test_per_class": 20,
            "dim": 8,
        },
        "partitioning": {"scheme": "seldp"},
        "strategy": {
            "kind": "selsync",
            "delta": 0.3,
            "aggregation": "params",
            "warmup": 10,
            "smoothing": None,
        },
        "cluster": {"n_workers": 4, "transport": {"kind": "sim"}},
        "batch_size": 16,
        "schedule": {"initial_lr": 0.1, "milestones": [], "mode": "per_step"},
        "budget": {"steps": 60},
        "eval_every": 15,
        "seeds": {"data": 1, "init": 2, "schedule": 3, "participants": 4, "injection": 5},
    }


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "cfg.json"
    cfg.write_text(json.dumps(small_config_obj()))
    out = base / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return out


class TestRun:
    def test_writes_files_and_reports_lssr(self, run_dir, capsys):
        capsys.readouterr()
        for name in ("metrics.jsonl", "eval.csv", "summary.json"):
            assert (run_dir / name).exists()

    def test_missing_config_fails(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_invalid_config_fails(self, tmp_path, capsys):
        obj = small_config_obj()
        obj["strategy"] = {"kind": "sgd"}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(obj))
        code = main(["run", "--config", str(path), "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_summary_line_printed(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        obj = small_config_obj()
        obj["budget"] = {"steps": 12}
        obj["cluster"] = {"n_workers": 2, "transport": {"kind": "sim"}}
        cfg.write_text(json.dumps(obj))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
        out = capsys.readouterr().out
        assert "lssr=" in out
        assert "steps=24" in out


class TestGenerateData:
    def test_writes_loadable_csv(self, tmp_path):
        code = main(
            [
                "generate-data",
                "--out",
                str(tmp_path),
                "--classes",
                "3",
                "--train-per-class",
                "20",
                "--test-per-class",
                "5",
                "--dim",
                "4",
                "--seed",
                "7",
            ]
        )
        assert code == 0
        train = load_csv(tmp_path / "train.csv")
        test = load_csv(tmp_path / "test.csv")
        assert len(train.labels) == 60
        assert len(test.labels) == 15
        assert train.features.shape[1] == 4


class TestReplayTrace:
    def test_monotone_over_grid(self, run_dir, capsys):
        code = main(
            [
                "replay-trace",
                "--trace",
                str(run_dir / "metrics.jsonl"),
                "--deltas",
                "0,0.1,0.25,0.3,0.5,1.0",
                "--warmup",
                "10",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "monotone" in out
        counts = [int(line.split("syncs=")[1]) for line in out.splitlines() if "syncs=" in line]
        assert counts == sorted(counts, reverse=True)
        assert counts[0] == 60  # zero threshold syncs every step

    def test_negative_delta_rejected(self, run_dir, capsys):
        code = main(
            ["replay-trace", "--trace", str(run_dir / "metrics.jsonl"), "--deltas", "-0.5"]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_worker_rejected(self, run_dir, capsys):
        code = main(
            [
                "replay-trace",
                "--trace",
                str(run_dir / "metrics.jsonl"),
                "--deltas",
                "0.1",
                "--worker",
                "99",
            ]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestCompare:
    def test_run_against_itself(self, run_dir, capsys):
        assert main(["compare", "--baseline", str(run_dir), "--candidate", str(run_dir)]) == 0
        verdict = json.loads(capsys.readouterr().out)
        assert verdict["conv_diff"] == 0.0
        assert verdict["speedup"] == 1.0
        assert verdict["outperforms"] is False

    def test_accepts_summary_path_directly(self, run_dir, capsys):
        path = str(run_dir / "summary.json")
        assert main(["compare", "--baseline", path, "--candidate", path]) == 0
        assert json.loads(capsys.readouterr().out)["speedup"] == 1.0


class TestParser:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])

    def test_sparse_config_normalizes_stably(self):
        # defaults omitted from the file come back explicit, then stay fixed
        cfg = config_from_json(small_config_obj())
        normalized = config_to_json(cfg)
        assert config_from_json(normalized) == cfg
        assert config_to_json(config_from_json(normalized)) == normalized
