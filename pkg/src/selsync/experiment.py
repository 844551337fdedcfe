"""Experiment configuration, resolution, and the end-to-end run harness.

An ExperimentConfig mirrors the JSON config file field for field. resolve()
turns it into live objects (datasets, samplers, server, worker contexts);
run_experiment() executes the cluster and writes metrics.jsonl, eval.csv,
and summary.json into the run directory.

All randomness is governed by the five named seeds: data (dataset noise,
chunk boundaries, shuffles, label assignment), init (parameter init),
schedule (deterministic interleaving), participants (averaging-round draws),
injection (donor and donation draws).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .data import (
    ChunkSampler,
    Dataset,
    InjectionConfig,
    NonIIDSpec,
    SubsetSampler,
    adjusted_batch,
    bind_plan,
    load_csv,
    make_blob_splits,
    plan_defdp,
    plan_noniid,
    plan_seldp,
    split_chunks,
)
from .errors import ConfigError
from .metrics import (
    RunSummary,
    load_eval_csv,
    load_metrics_jsonl,
    load_summary_json,
    sorted_rows,
    summarize,
    write_eval_csv,
    write_metrics_jsonl,
    write_summary_json,
)
from .model import LrSchedule, ModelSpec
from .runtime import (
    ClusterConfig,
    ParameterServer,
    RunResult,
    SimTransport,
    SocketTransport,
    run_simulation,
    verify_conservation,
)
from .sockets import run_sockets
from .strategies import (
    BspConfig,
    FedAvgConfig,
    LogicalCosts,
    SelSyncConfig,
    SspConfig,
    StrategyConfig,
    WorkerContext,
)

PARTITION_SCHEMES = ("defdp", "seldp", "noniid")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    schedule: int = 0
    participants: int = 0
    injection: int = 0


@dataclass(frozen=True)
class BlobSource:
    """Synthetic Gaussian-cluster dataset generated at resolve time."""

    num_classes: int
    train_per_class: int
    test_per_class: int
    dim: int


@dataclass(frozen=True)
class CsvSource:
    train_path: str
    test_path: str


DataSource = Union[BlobSource, CsvSource]


@dataclass(frozen=True)
class Partitioning:
    scheme: str
    labels_per_worker: int = 0

    def __post_init__(self):
        if self.scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"unknown partitioning scheme {self.scheme!r}")
        if self.scheme == "noniid" and self.labels_per_worker < 1:
            raise ConfigError("noniid partitioning needs labels_per_worker >= 1")


@dataclass(frozen=True)
class Budget:
    """Run length, either an exact step count or epochs of the local stream."""

    unit: str
    amount: float

    def __post_init__(self):
        if self.unit not in ("steps", "epochs"):
            raise ConfigError(f"budget unit must be steps or epochs, got {self.unit!r}")
        if self.unit == "steps":
            if int(self.amount) != self.amount or self.amount < 1:
                raise ConfigError(f"step budget must be a positive integer, got {self.amount}")
        elif self.amount <= 0:
            raise ConfigError(f"epoch budget must be positive, got {self.amount}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    dataset: DataSource
    partitioning: Partitioning
    strategy: StrategyConfig
    cluster: ClusterConfig
    batch_size: int
    schedule: LrSchedule
    budget: Budget
    eval_every: int
    seeds: Seeds
    injection: Optional[InjectionConfig] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.injection is not None and self.partitioning.scheme != "noniid":
            raise ConfigError("sample injection requires noniid partitioning")
        if self.injection is not None and isinstance(self.strategy, SspConfig):
            raise ConfigError("sample injection needs a lockstep strategy, not ssp")
        if self.injection is not None and self.injection.base_batch != self.batch_size:
            raise ConfigError("injection base_batch must equal the configured batch_size")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"missing {key!r} in {where}")
    return mapping[key]


def _dataset_from_json(obj: dict) -> DataSource:
    kind = _require(obj, "kind", "dataset")
    if kind == "blobs":
        return BlobSource(
            num_classes=int(obj["num_classes"]),
            train_per_class=int(obj["train_per_class"]),
            test_per_class=int(obj["test_per_class"]),
            dim=int(obj["dim"]),
        )
    if kind == "csv":
        return CsvSource(train_path=str(obj["train_path"]), test_path=str(obj["test_path"]))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _strategy_from_json(obj: dict, seeds: Seeds) -> StrategyConfig:
    kind = _require(obj, "kind", "strategy")
    if kind == "bsp":
        return BspConfig(aggregation=obj.get("aggregation", "params"))
    if kind == "fedavg":
        return FedAvgConfig(
            fraction=float(obj["fraction"]),
            local_epochs=float(obj["local_epochs"]),
            participant_seed=seeds.participants,
        )
    if kind == "ssp":
        return SspConfig(staleness=int(obj["staleness"]))
    if kind == "selsync":
        smoothing = obj.get("smoothing")
        return SelSyncConfig(
            delta=float(obj["delta"]),
            aggregation=obj.get("aggregation", "params"),
            warmup=int(obj.get("warmup", 25)),
            smoothing=None if smoothing is None else float(smoothing),
        )
    raise ConfigError(f"unknown strategy kind {kind!r}")


def _strategy_to_json(strategy: StrategyConfig) -> dict:
    if isinstance(strategy, BspConfig):
        return {"kind": "bsp", "aggregation": strategy.aggregation}
    if isinstance(strategy, FedAvgConfig):
        return {
            "kind": "fedavg",
            "fraction": strategy.fraction,
            "local_epochs": strategy.local_epochs,
        }
    if isinstance(strategy, SspConfig):
        return {"kind": "ssp", "staleness": strategy.staleness}
    if isinstance(strategy, SelSyncConfig):
        return {
            "kind": "selsync",
            "delta": strategy.delta,
            "aggregation": strategy.aggregation,
            "warmup": strategy.warmup,
            "smoothing": strategy.smoothing,
        }
    raise ConfigError(f"unknown strategy type {type(strategy).__name__}")


def _cluster_from_json(obj: dict, seeds: Seeds) -> ClusterConfig:
    tobj = obj.get("transport", {"kind": "sim"})
    kind = tobj.get("kind", "sim")
    if kind == "sim":
        transport = SimTransport(schedule_seed=seeds.schedule)
    elif kind == "sockets":
        transport = SocketTransport(
            host=tobj.get("host", "127.0.0.1"), port=int(tobj.get("port", 0))
        )
    else:
        raise ConfigError(f"unknown transport kind {kind!r}")
    delays = obj.get("delay_factors")
    return ClusterConfig(
        n_workers=int(_require(obj, "n_workers", "cluster")),
        transport=transport,
        step_timeout=float(obj.get("step_timeout", 30.0)),
        compute_cost=float(obj.get("compute_cost", 1.0)),
        comm_cost=float(obj.get("comm_cost", 5.0)),
        delay_factors=None if delays is None else tuple(float(d) for d in delays),
    )


def _budget_from_json(obj: dict) -> Budget:
    keys = [k for k in ("steps", "epochs") if k in obj]
    if len(keys) != 1:
        raise ConfigError("budget must carry exactly one of steps or epochs")
    return Budget(unit=keys[0], amount=obj[keys[0]])


def config_from_json(obj: dict) -> ExperimentConfig:
    """Build a validated config from the JSON-file representation."""
    seeds = Seeds(**{k: int(v) for k, v in obj.get("seeds", {}).items()})
    mobj = _require(obj, "model", "config")
    model = ModelSpec(
        input_dim=int(mobj["input_dim"]),
        hidden_dims=tuple(int(h) for h in mobj.get("hidden_dims", ())),
        num_classes=int(mobj["num_classes"]),
        activation=mobj.get("activation", "relu"),
        init_seed=seeds.init,
    )
    pobj = _require(obj, "partitioning", "config")
    partitioning = Partitioning(
        scheme=_require(pobj, "scheme", "partitioning"),
        labels_per_worker=int(pobj.get("labels_per_worker", 0)),
    )
    sobj = _require(obj, "schedule", "config")
    schedule = LrSchedule(
        initial_lr=float(sobj["initial_lr"]),
        milestones=tuple((int(b), float(f)) for b, f in sobj.get("milestones", ())),
        mode=sobj.get("mode", "per_step"),
    )
    batch_size = int(_require(obj, "batch_size", "config"))
    iobj = obj.get("injection")
    injection = None
    if iobj is not None:
        injection = InjectionConfig(
            alpha=float(iobj["alpha"]), beta=float(iobj["beta"]), base_batch=batch_size
        )
    return ExperimentConfig(
        model=model,
        dataset=_dataset_from_json(_require(obj, "dataset", "config")),
        partitioning=partitioning,
        strategy=_strategy_from_json(_require(obj, "strategy", "config"), seeds),
        cluster=_cluster_from_json(_require(obj, "cluster", "config"), seeds),
        batch_size=batch_size,
        schedule=schedule,
        budget=_budget_from_json(_require(obj, "budget", "config")),
        eval_every=int(_require(obj, "eval_every", "config")),
        seeds=seeds,
        injection=injection,
    )


def config_to_json(cfg: ExperimentConfig) -> dict:
    """Inverse of config_from_json; derived seeds are not re-emitted."""
    if isinstance(cfg.dataset, BlobSource):
        dataset = {"kind": "blobs", **dataclasses.asdict(cfg.dataset)}
    else:
        dataset = {"kind": "csv", **dataclasses.asdict(cfg.dataset)}
    partitioning: dict = {"scheme": cfg.partitioning.scheme}
    if cfg.partitioning.scheme == "noniid":
        partitioning["labels_per_worker"] = cfg.partitioning.labels_per_worker
    transport = cfg.cluster.transport
    if isinstance(transport, SocketTransport):
        tjson = {"kind": "sockets", "host": transport.host, "port": transport.port}
    else:
        tjson = {"kind": "sim"}
    out = {
        "model": {
            "input_dim": cfg.model.input_dim,
            "hidden_dims": list(cfg.model.hidden_dims),
            "num_classes": cfg.model.num_classes,
            "activation": cfg.model.activation,
        },
        "dataset": dataset,
        "partitioning": partitioning,
        "strategy": _strategy_to_json(cfg.strategy),
        "cluster": {
            "n_workers": cfg.cluster.n_workers,
            "transport": tjson,
            "step_timeout": cfg.cluster.step_timeout,
            "compute_cost": cfg.cluster.compute_cost,
            "comm_cost": cfg.cluster.comm_cost,
            "delay_factors": None
            if cfg.cluster.delay_factors is None
            else list(cfg.cluster.delay_factors),
        },
        "batch_size": cfg.batch_size,
        "schedule": {
            "initial_lr": cfg.schedule.initial_lr,
            "milestones": [list(m) for m in cfg.schedule.milestones],
            "mode": cfg.schedule.mode,
        },
        "budget": {cfg.budget.unit: cfg.budget.amount},
        "eval_every": cfg.eval_every,
        "seeds": dataclasses.asdict(cfg.seeds),
    }
    if cfg.injection is not None:
        out["injection"] = {"alpha": cfg.injection.alpha, "beta": cfg.injection.beta}
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_json(obj)


@dataclass
class ResolvedExperiment:
    """Live objects materialized from a config, ready to execute."""

    config: ExperimentConfig
    train: Dataset
    test: Dataset
    ps: ParameterServer
    contexts: list[WorkerContext]
    effective_batch: int
    steps_per_epoch: int
    budget_steps: int


def _load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if isinstance(cfg.dataset, BlobSource):
        d = cfg.dataset
        return make_blob_splits(
            d.num_classes, d.train_per_class, d.test_per_class, d.dim, cfg.seeds.data
        )
    return load_csv(cfg.dataset.train_path), load_csv(cfg.dataset.test_path)


def _build_samplers(cfg: ExperimentConfig, train: Dataset, b_eff: int) -> list:
    n = cfg.cluster.n_workers
    scheme = cfg.partitioning.scheme
    if scheme == "noniid":
        spec = NonIIDSpec(cfg.partitioning.labels_per_worker, assignment_seed=cfg.seeds.data)
        parts = plan_noniid(train, n, spec)
        return [
            SubsetSampler(train, parts[w], b_eff, seed=cfg.seeds.data, worker_id=w)
            for w in range(n)
        ]
    split = split_chunks(len(train.labels), n, seed=cfg.seeds.data)
    planner = plan_defdp if scheme == "defdp" else plan_seldp
    return [
        ChunkSampler(train, split, bind_plan(planner(w, n), split), b_eff, seed=cfg.seeds.data)
        for w in range(n)
    ]


def resolve(cfg: ExperimentConfig) -> ResolvedExperiment:
    train, test = _load_datasets(cfg)
    if train.features.shape[1] != cfg.model.input_dim:
        raise ConfigError(
            f"dataset dim {train.features.shape[1]} != model input_dim {cfg.model.input_dim}"
        )
    n = cfg.cluster.n_workers
    b_eff = cfg.batch_size
    if cfg.injection is not None:
        b_eff = adjusted_batch(cfg.injection, n)
    # nominal epoch length: samples one worker's stream touches per pass
    if cfg.partitioning.scheme == "seldp":
        steps_per_epoch = len(train.labels) // b_eff
    else:
        steps_per_epoch = (len(train.labels) // n) // b_eff
    if steps_per_epoch < 1:
        raise ConfigError("dataset too small for one step per epoch at this batch size")
    if cfg.budget.unit == "steps":
        budget_steps = int(cfg.budget.amount)
    else:
        budget_steps = max(1, round(cfg.budget.amount * steps_per_epoch))
    samplers = _build_samplers(cfg, train, b_eff)
    sim = isinstance(cfg.cluster.transport, SimTransport)
    ps = ParameterServer(cfg.model, cfg.strategy, n, cfg.schedule, steps_per_epoch)
    contexts = []
    for w in range(n):
        costs = None
        if sim:
            costs = LogicalCosts(
                compute=cfg.cluster.compute_cost,
                comm=cfg.cluster.comm_cost,
                delay=cfg.cluster.delay_for(w),
            )
        contexts.append(
            WorkerContext(
                worker_id=w,
                n_workers=n,
                spec=cfg.model,
                sampler=samplers[w],
                strategy=cfg.strategy,
                schedule=cfg.schedule,
                steps_per_epoch=steps_per_epoch,
                budget_steps=budget_steps,
                eval_every=cfg.eval_every,
                test_set=test if w == 0 else None,
                injection=cfg.injection,
                injection_seed=cfg.seeds.injection,
                logical_costs=costs,
            )
        )
    return ResolvedExperiment(
        config=cfg,
        train=train,
        test=test,
        ps=ps,
        contexts=contexts,
        effective_batch=b_eff,
        steps_per_epoch=steps_per_epoch,
        budget_steps=budget_steps,
    )


def execute(cfg: ExperimentConfig) -> RunResult:
    """Resolve and run one experiment, checking byte conservation."""
    resolved = resolve(cfg)
    if isinstance(cfg.cluster.transport, SimTransport):
        result = run_simulation(resolved.ps, resolved.contexts, cfg.cluster)
    else:
        result = run_sockets(resolved.ps, resolved.contexts, cfg.cluster)
    verify_conservation(result)
    return result


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> RunSummary:
    """Execute the cluster and write metrics.jsonl, eval.csv, summary.json."""
    result = execute(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted_rows(result.rows)
    write_metrics_jsonl(rows, out / "metrics.jsonl")
    evals = sorted(result.eval_rows, key=lambda e: e["step"])
    write_eval_csv(evals, out / "eval.csv")
    summary = summarize(rows, evals, result.wall_time)
    write_summary_json(summary, out / "summary.json")
    return summary


def load_run_dir(path: str | Path) -> dict:
    """Read back the three files run_experiment writes."""
    run = Path(path)
    return {
        "rows": load_metrics_jsonl(run / "metrics.jsonl"),
        "evals": load_eval_csv(run / "eval.csv"),
        "summary": load_summary_json(run / "summary.json"),
    }
