"""Bookkeeping math and file formats: ratio arithmetic, evaluation against
scalar re-computation, summaries, JSONL/CSV round trips, and run comparison."""

import json
import math

import numpy as np
import pytest

from selsync.data import Dataset
from selsync.errors import ConfigError
from selsync.metrics import (
    MetricsRecord,
    RunSummary,
    compare_runs,
    comm_reduction,
    eval_curve,
    evaluate,
    load_eval_csv,
    load_metrics_jsonl,
    load_summary_json,
    lssr,
    sorted_rows,
    summarize,
    time_to_target,
    write_eval_csv,
    write_metrics_jsonl,
    write_summary_json,
)
from selsync.model import ModelSpec, ParamVector, init_params, param_layout


def record(step=0, worker=0, decision="sync", sent=100, received=100, duration=1.0, **kw):
    base = dict(
        step=step,
        worker_id=worker,
        loss=0.5,
        grad_norm_sq=2.0,
        ewma=1.5,
        delta_g=0.1,
        decision=decision,
        bytes_sent=sent,
        bytes_received=received,
        step_duration=duration,
        lr=0.05,
    )
    base.update(kw)
    return MetricsRecord(**base)


class TestRatios:
    def test_lssr_examples(self):
        assert lssr(0, 7) == 0.0
        assert lssr(7, 0) == 1.0
        assert lssr(9000, 1000) == 0.9

    def test_lssr_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            lssr(-1, 5)
        with pytest.raises(ValueError):
            lssr(0, 0)

    def test_comm_reduction_examples(self):
        assert comm_reduction(0.9) == pytest.approx(10.0)
        assert comm_reduction(0.0) == 1.0
        assert comm_reduction(0.5) == 2.0
        assert math.isinf(comm_reduction(1.0))

    @pytest.mark.parametrize("bad", [-0.1, 1.0001])
    def test_comm_reduction_range(self, bad):
        with pytest.raises(ValueError):
            comm_reduction(bad)


class TestEvaluate:
    def separable(self):
        feats = np.array([[1.0], [2.0], [-1.0], [-2.0]])
        labels = np.array([1, 1, 0, 0], dtype=np.int64)
        return Dataset(features=feats, labels=labels, num_classes=2)

    def test_perfect_separation(self):
        spec = ModelSpec(input_dim=1, hidden_dims=(), num_classes=2)
        layout = param_layout(spec)
        params = ParamVector(np.array([-1.0, 1.0, 0.0, 0.0]), layout)  # W then b
        scores = evaluate(params, self.separable(), spec)
        assert scores["accuracy"] == 1.0

    def test_random_params_near_chance_on_random_labels(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((2000, 6))
        labels = rng.integers(0, 2, size=2000).astype(np.int64)
        data = Dataset(features=feats, labels=labels, num_classes=2)
        spec = ModelSpec(input_dim=6, hidden_dims=(), num_classes=2)
        for seed in range(10):
            params = init_params(ModelSpec(6, (), 2, init_seed=seed))
            acc = evaluate(params, data, spec)["accuracy"]
            assert abs(acc - 0.5) < 0.05

    def test_mean_loss_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((40, 5))
        labels = rng.integers(0, 3, size=40).astype(np.int64)
        data = Dataset(features=feats, labels=labels, num_classes=3)
        spec = ModelSpec(input_dim=5, hidden_dims=(), num_classes=3)
        params = init_params(spec)
        got = evaluate(params, data, spec)["mean_loss"]
        w = params.tensor(0)
        b = params.tensor(1)
        acc = 0.0
        for i in range(40):
            z = feats[i] @ w + b
            z = z - z.max()
            p = np.exp(z) / np.exp(z).sum()
            acc += -math.log(p[labels[i]])
        assert got == pytest.approx(acc / 40, abs=1e-12)

    def test_deterministic(self):
        spec = ModelSpec(input_dim=1, hidden_dims=(), num_classes=2)
        params = init_params(spec)
        a = evaluate(params, self.separable(), spec)
        b = evaluate(params, self.separable(), spec)
        assert a == b

    def test_empty_split_rejected(self):
        spec = ModelSpec(input_dim=1, hidden_dims=(), num_classes=2)
        empty = Dataset(features=np.empty((0, 1)), labels=np.empty(0, dtype=np.int64), num_classes=2)
        with pytest.raises(ConfigError):
            evaluate(init_params(spec), empty, spec)


class TestRecords:
    def test_decision_validated(self):
        with pytest.raises(ConfigError):
            record(decision="maybe")

    def test_from_dict_ignores_extra_keys(self):
        d = record().to_dict()
        d["type"] = "row"
        d["spurious"] = 99
        assert MetricsRecord.from_dict(d) == record()

    def test_sorted_rows_orders_by_step_then_worker(self):
        rows = [record(step=1, worker=0), record(step=0, worker=1), record(step=0, worker=0)]
        ordered = sorted_rows(rows)
        assert [(r.step, r.worker_id) for r in ordered] == [(0, 0), (0, 1), (1, 0)]


class TestSummarize:
    def rows(self):
        return [
            record(step=0, worker=0, decision="sync", sent=10, received=20),
            record(step=1, worker=0, decision="local", sent=1, received=2),
            record(step=2, worker=0, decision="local", sent=1, received=2),
            record(step=3, worker=0, decision="local", sent=1, received=2),
        ]

    def evals(self):
        return [
            {"step": 1, "accuracy": 0.6, "mean_loss": 1.0},
            {"step": 3, "accuracy": 0.55, "mean_loss": 1.1},
        ]

    def test_counts_and_ratio(self):
        s = summarize(self.rows(), self.evals(), wall_time=12.5)
        assert s.total_steps == 4
        assert s.steps_local == 3
        assert s.steps_bsp == 1
        assert s.steps_local + s.steps_bsp == s.total_steps
        assert s.lssr == 0.75
        assert s.comm_reduction == 4.0
        assert s.total_bytes == 39
        assert s.wall_time == 12.5

    def test_final_is_last_best_is_max(self):
        s = summarize(self.rows(), self.evals(), 1.0)
        assert s.final_metric == 0.55
        assert s.best_metric == 0.6

    def test_no_evals_leaves_metrics_none(self):
        s = summarize(self.rows(), [], 1.0)
        assert s.final_metric is None
        assert s.best_metric is None

    def test_empty_run_rejected(self):
        with pytest.raises(ValueError):
            summarize([], [], 0.0)

    def test_lssr_recomputable_from_decision_column(self, tmp_path):
        rows = self.rows()
        write_metrics_jsonl(rows, tmp_path / "metrics.jsonl")
        loaded = load_metrics_jsonl(tmp_path / "metrics.jsonl")
        local = sum(1 for r in loaded if r.decision == "local")
        bsp = len(loaded) - local
        s = summarize(rows, self.evals(), 1.0)
        assert s.lssr == lssr(local, bsp)


class TestFileFormats:
    def test_jsonl_round_trip_preserves_none(self, tmp_path):
        rows = [record(step=0, delta_g=None), record(step=1, delta_g=0.25)]
        path = tmp_path / "metrics.jsonl"
        write_metrics_jsonl(rows, path)
        assert load_metrics_jsonl(path) == sorted_rows(rows)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 2
        assert json.loads(lines[0])["delta_g"] is None

    def test_eval_csv_header_and_round_trip(self, tmp_path):
        evals = [
            {"step": 9, "accuracy": 0.625, "mean_loss": 1.0 / 3.0},
            {"step": 19, "accuracy": 0.75, "mean_loss": 0.25},
        ]
        path = tmp_path / "eval.csv"
        write_eval_csv(evals, path)
        assert path.read_text().splitlines()[0] == "step,accuracy,mean_loss"
        loaded = load_eval_csv(path)
        assert loaded == evals  # repr round trip keeps floats exact

    def test_summary_round_trip_with_infinite_reduction(self, tmp_path):
        s = RunSummary(
            total_steps=10,
            steps_local=10,
            steps_bsp=0,
            lssr=1.0,
            comm_reduction=math.inf,
            final_metric=None,
            best_metric=None,
            wall_time=3.5,
            total_bytes=0,
        )
        path = tmp_path / "summary.json"
        write_summary_json(s, path)
        loaded = load_summary_json(path)
        assert loaded == s
        assert math.isinf(loaded.comm_reduction)


class TestCurvesAndComparison:
    def make_rows(self, durations):
        return [record(step=i, worker=0, duration=d) for i, d in enumerate(durations)]

    def test_eval_curve_accumulates_worker_zero_time(self):
        rows = self.make_rows([2.0, 3.0, 4.0]) + [record(step=0, worker=1, duration=99.0)]
        evals = [
            {"step": 0, "accuracy": 0.5, "mean_loss": 1.0},
            {"step": 2, "accuracy": 0.8, "mean_loss": 0.5},
        ]
        assert eval_curve(rows, evals) == [(2.0, 0.5), (9.0, 0.8)]

    def test_eval_curve_requires_matching_record(self):
        rows = self.make_rows([1.0])
        with pytest.raises(ValueError):
            eval_curve(rows, [{"step": 5, "accuracy": 0.5, "mean_loss": 1.0}])

    def test_time_to_target(self):
        curve = [(2.0, 0.5), (9.0, 0.8)]
        assert time_to_target(curve, 0.5) == 2.0
        assert time_to_target(curve, 0.79) == 9.0
        assert time_to_target(curve, 0.9) is None

    def summary_with(self, final, wall=10.0):
        return RunSummary(4, 0, 4, 0.0, 1.0, final, final, wall, 100)

    def test_identical_runs_compare_flat(self):
        s = self.summary_with(0.8)
        curve = [(10.0, 0.8)]
        verdict = compare_runs(s, s, curve, curve)
        assert verdict == {"conv_diff": 0.0, "speedup": 1.0, "outperforms": False}

    def test_twice_as_fast(self):
        base = self.summary_with(0.8)
        cand = self.summary_with(0.85)
        verdict = compare_runs(base, cand, [(10.0, 0.8)], [(5.0, 0.85)])
        assert verdict["speedup"] == pytest.approx(2.0)
        assert verdict["conv_diff"] == pytest.approx(5.0)
        assert verdict["outperforms"]

    def test_candidate_misses_target(self):
        base = self.summary_with(0.8)
        cand = self.summary_with(0.7)
        verdict = compare_runs(base, cand, [(10.0, 0.8)], [(10.0, 0.7)])
        assert verdict["speedup"] is None
        assert not verdict["outperforms"]

    def test_requires_final_metrics(self):
        with pytest.raises(ValueError):
            compare_runs(self.summary_with(None), self.summary_with(0.5), [], [])
