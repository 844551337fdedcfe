"""Command-line front end.

Subcommands: run (execute one experiment from a JSON config), generate-data
(synthetic blobs to CSV), replay-trace (counterfactual sync counts across a
threshold grid, with a monotonicity check), compare (two run summaries).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import make_blob_splits, save_csv
from .errors import ConfigError, ProtocolError, SignalError, TransportError
from .metrics import compare_runs, eval_curve, load_eval_csv, load_metrics_jsonl, load_summary_json
from .signal import DeltaThreshold, replay_decisions
from .experiment import load_config, run_experiment


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg, args.out)
    out = Path(args.out)
    print(f"wrote {out / 'metrics.jsonl'}, {out / 'eval.csv'}, {out / 'summary.json'}")
    print(
        f"steps={summary.total_steps} local={summary.steps_local} bsp={summary.steps_bsp} "
        f"lssr={summary.lssr:.6g} comm_reduction={_fmt(summary.comm_reduction)} "
        f"final={_fmt(summary.final_metric)} best={_fmt(summary.best_metric)} "
        f"wall={summary.wall_time:.6g} bytes={summary.total_bytes}"
    )
    return 0


def _cmd_generate_data(args) -> int:
    train, test = make_blob_splits(
        args.classes, args.train_per_class, args.test_per_class, args.dim, args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train, out / "train.csv")
    save_csv(test, out / "test.csv")
    print(f"wrote {out / 'train.csv'} ({len(train.labels)} rows)")
    print(f"wrote {out / 'test.csv'} ({len(test.labels)} rows)")
    return 0


def _cmd_replay_trace(args) -> int:
    rows = load_metrics_jsonl(args.trace)
    trace = [r.delta_g for r in rows if r.worker_id == args.worker]
    if not trace:
        raise ConfigError(f"trace has no records for worker {args.worker}")
    grid = sorted(float(d) for d in args.deltas.split(","))
    for d in grid:
        DeltaThreshold(d)  # range check before replaying
    counts = [replay_decisions(trace, args.warmup, d) for d in grid]
    for d, c in zip(grid, counts):
        print(f"delta={d:g} syncs={c}")
    for (d1, c1), (d2, c2) in zip(zip(grid, counts), zip(grid[1:], counts[1:])):
        if c2 > c1:
            print(
                f"monotonicity violated: delta={d2:g} syncs={c2} > delta={d1:g} syncs={c1}",
                file=sys.stderr,
            )
            return 1
    print("monotone: sync counts nonincreasing in delta")
    return 0


def _curve_for(summary_path: Path):
    run_dir = summary_path.parent
    rows_path = run_dir / "metrics.jsonl"
    evals_path = run_dir / "eval.csv"
    if rows_path.exists() and evals_path.exists():
        return eval_curve(load_metrics_jsonl(rows_path), load_eval_csv(evals_path))
    return []


def _summary_path(arg: str) -> Path:
    path = Path(arg)
    return path / "summary.json" if path.is_dir() else path


def _cmd_compare(args) -> int:
    base_path = _summary_path(args.baseline)
    cand_path = _summary_path(args.candidate)
    baseline = load_summary_json(base_path)
    candidate = load_summary_json(cand_path)
    verdict = compare_runs(baseline, candidate, _curve_for(base_path), _curve_for(cand_path))
    print(json.dumps(verdict, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selsync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to the experiment JSON")
    p_run.add_argument("--out", required=True, help="run directory for the output files")
    p_run.set_defaults(func=_cmd_run)

    p_gen = sub.add_parser("generate-data", help="write synthetic blob splits to CSV")
    p_gen.add_argument("--out", required=True, help="directory for train.csv and test.csv")
    p_gen.add_argument("--classes", type=int, default=10)
    p_gen.add_argument("--train-per-class", type=int, default=2000)
    p_gen.add_argument("--test-per-class", type=int, default=400)
    p_gen.add_argument("--dim", type=int, default=20)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=_cmd_generate_data)

    p_replay = sub.add_parser(
        "replay-trace", help="replay a recorded signal trace across a threshold grid"
    )
    p_replay.add_argument("--trace", required=True, help="metrics.jsonl from a finished run")
    p_replay.add_argument("--deltas", required=True, help="comma-separated thresholds")
    p_replay.add_argument("--worker", type=int, default=0, help="whose trace to replay")
    p_replay.add_argument("--warmup", type=int, default=25, help="forced-sync prefix length")
    p_replay.set_defaults(func=_cmd_replay_trace)

    p_cmp = sub.add_parser("compare", help="convergence difference and speedup of two runs")
    p_cmp.add_argument("--baseline", required=True, help="summary.json or its run directory")
    p_cmp.add_argument("--candidate", required=True, help="summary.json or its run directory")
    p_cmp.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SignalError, ProtocolError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
