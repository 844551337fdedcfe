"""Per-step coordination protocols over the parameter-server message layer.

Each worker is a generator that yields transport operations and is resumed
with the result, so every protocol runs unchanged under the deterministic
scheduler and the socket transport:

    ("send", envelope)        -> None
    ("recv", None)            -> next Envelope addressed to this worker
    ("work", units, step)     -> None; charges logical compute time

Four protocols are provided: bulk-synchronous (BSP), periodic federated
averaging (FedAvg), stale-synchronous (SSP), and selective synchronization
(SelSync), which flips between local and synchronous updates based on the
relative change of the smoothed gradient norm.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .data import (
    Dataset,
    InjectionConfig,
    donation_rows,
    donors_for_step,
)
from .errors import ConfigError, ProtocolError
from .metrics import MetricsRecord, evaluate
from .model import (
    Batch,
    LrSchedule,
    ModelSpec,
    ParamVector,
    forward_backward,
    lr_at,
    param_count,
    param_layout,
    sgd_step,
)
from .signal import (
    DeltaThreshold,
    GradSignalState,
    decide,
    default_smoothing,
    observe,
    relative_change,
)
from . import wire
from .wire import Envelope

AGG_MODES = ("params", "grads")


def _check_agg(mode: str) -> None:
    if mode not in AGG_MODES:
        raise ConfigError(f"aggregation must be one of {AGG_MODES}, got {mode!r}")


@dataclass(frozen=True)
class BspConfig:
    """Aggregate everyone's update behind a barrier at every step."""

    aggregation: str = "params"

    def __post_init__(self):
        _check_agg(self.aggregation)


@dataclass(frozen=True)
class FedAvgConfig:
    """Local SGD with periodic averaging of a random worker fraction.

    fraction is the share of workers pulled into each averaging round;
    local_epochs is the stretch of an epoch trained locally between rounds.
    """

    fraction: float
    local_epochs: float
    participant_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if not 0.0 < self.local_epochs <= 1.0:
            raise ConfigError(
                f"local_epochs must be in (0, 1], got {self.local_epochs}"
            )


@dataclass(frozen=True)
class SspConfig:
    """Asynchronous updates; fast workers block once they lead by > staleness."""

    staleness: int

    def __post_init__(self):
        if self.staleness < 1:
            raise ConfigError(f"staleness must be >= 1, got {self.staleness}")


@dataclass(frozen=True)
class SelSyncConfig:
    """Synchronize a step only when any worker's gradient signal crosses delta."""

    delta: float
    aggregation: str = "params"
    warmup: int = 25
    smoothing: Optional[float] = None

    def __post_init__(self):
        _check_agg(self.aggregation)
        DeltaThreshold(self.delta)  # reuse its range validation
        if self.warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {self.warmup}")
        if self.smoothing is not None and not 0.0 < self.smoothing <= 1.0:
            raise ConfigError(f"smoothing must be in (0, 1], got {self.smoothing}")


StrategyConfig = BspConfig | FedAvgConfig | SspConfig | SelSyncConfig


@dataclass(frozen=True)
class LogicalCosts:
    """Per-step logical time: compute units, sync communication, worker slowdown."""

    compute: float = 1.0
    comm: float = 5.0
    delay: float = 1.0


@dataclass
class WorkerContext:
    """Everything one worker needs to run; mutated only by its own generator."""

    worker_id: int
    n_workers: int
    spec: ModelSpec
    sampler: object
    strategy: StrategyConfig
    schedule: LrSchedule
    steps_per_epoch: int
    budget_steps: int
    eval_every: int
    test_set: Optional[Dataset] = None
    injection: Optional[InjectionConfig] = None
    injection_seed: int = 0
    logical_costs: Optional[LogicalCosts] = None
    capture: Optional[Callable[[int], bool]] = None

    def lr_for(self, step: int) -> float:
        return lr_at(self.schedule, step, step // self.steps_per_epoch)


def aggregate_mean(vectors: list[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of identically laid out vectors."""
    if not vectors:
        raise ValueError("aggregate_mean needs at least one vector")
    layout = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != layout:
            raise ValueError("aggregate_mean: layout mismatch")
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(stacked.mean(axis=0), layout)


def fedavg_interval(cfg: FedAvgConfig, steps_per_epoch: int) -> int:
    """Steps between averaging rounds; must resolve to at least one step."""
    interval = round(cfg.local_epochs * steps_per_epoch)
    if interval < 1:
        raise ConfigError(
            f"averaging interval resolves to {interval} steps "
            f"(local_epochs={cfg.local_epochs}, steps_per_epoch={steps_per_epoch})"
        )
    return interval


def fedavg_participants(
    n_workers: int, fraction: float, seed: int, round_index: int
) -> tuple[int, ...]:
    """Seeded draw of the round's participants, identical on server and workers."""
    k = math.ceil(fraction * n_workers)
    rng = np.random.default_rng(np.random.SeedSequence([seed, round_index]))
    picked = rng.choice(n_workers, size=k, replace=False)
    return tuple(int(w) for w in np.sort(picked))


class _WorkerState:
    """Mutable per-run scratch owned by a single worker generator."""

    def __init__(self, ctx: WorkerContext):
        self.params: Optional[ParamVector] = None
        self.signal = _init_signal(ctx)
        self.stop_pending = False
        self.sent_bytes = 0
        self.recv_bytes = 0
        self.last_min = 0
        self.steps_done = 0
        self.trajectory: list[tuple[int, np.ndarray]] = []


def _init_signal(ctx: WorkerContext) -> GradSignalState:
    if isinstance(ctx.strategy, SelSyncConfig):
        smoothing = ctx.strategy.smoothing
        if smoothing is None:
            smoothing = default_smoothing(ctx.n_workers)
        return GradSignalState(smoothing=smoothing, warmup=ctx.strategy.warmup)
    # other strategies never consult decide(); the signal only feeds the records
    return GradSignalState(smoothing=default_smoothing(ctx.n_workers))


def _send(st: _WorkerState, env: Envelope):
    if env.kind in wire.COUNTED_KINDS:
        st.sent_bytes += wire.frame_size(env)
    return ("send", env)


def _recv(st: _WorkerState, *kinds: int):
    """Await one of the given kinds; a Shutdown is remembered, not consumed.

    The stop request takes effect at the next step boundary so that a step,
    once begun, always completes and its record accounts for all its bytes.
    """
    while True:
        env = yield ("recv", None)
        if env.kind == wire.SHUTDOWN:
            st.stop_pending = True
            continue
        if env.kind not in kinds:
            names = ", ".join(wire.KIND_NAMES[k] for k in kinds)
            raise ProtocolError(f"expected {names}, got {env.kind_name}")
        if env.kind in wire.COUNTED_KINDS:
            st.recv_bytes += wire.frame_size(env)
        return env


def _bootstrap(ctx: WorkerContext, st: _WorkerState):
    """Fetch the initial replica. Excluded from traffic accounting."""
    yield ("send", Envelope(wire.PULL_REQUEST, ctx.worker_id, 0, b""))
    while True:
        env = yield ("recv", None)
        if env.kind == wire.SHUTDOWN:
            st.stop_pending = True
            continue
        if env.kind != wire.GLOBAL_PARAMS:
            raise ProtocolError(f"expected GlobalParams, got {env.kind_name}")
        break
    values = wire.bytes_to_vector(env.payload, param_count(ctx.spec))
    st.params = ParamVector(values, param_layout(ctx.spec))


def _injection_exchange(ctx: WorkerContext, st: _WorkerState, step: int, batch: Batch):
    """Donate a slice of the local batch and fold in every other donor's slice.

    Matches the pure reference round in the data module: donor rows stay in
    the donor's own batch, and foreign slices append in donor id order.
    """
    cfg = ctx.injection
    donors = set(
        int(d) for d in donors_for_step(ctx.injection_seed, step, ctx.n_workers, cfg.alpha)
    )
    if ctx.worker_id in donors:
        rows = donation_rows(batch, cfg.beta, ctx.injection_seed, step, ctx.worker_id)
        payload = wire.samples_to_bytes(batch.features[rows], batch.labels[rows])
        yield _send(st, Envelope(wire.DATA_SHARE, ctx.worker_id, step, payload))
    shares: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(len(donors - {ctx.worker_id})):
        env = yield from _recv(st, wire.DATA_SHARE)
        shares[env.sender] = wire.bytes_to_samples(env.payload, ctx.spec.input_dim)
    feats = [batch.features]
    labels = [batch.labels]
    for donor in sorted(shares):
        f, y = shares[donor]
        feats.append(f)
        labels.append(y)
    return Batch(np.concatenate(feats), np.concatenate(labels), batch.source_chunk)


def _grad_and_signal(ctx: WorkerContext, st: _WorkerState, batch: Batch):
    loss, grad = forward_backward(st.params, batch, ctx.spec)
    gnorm2 = float(grad @ grad)
    st.signal = observe(st.signal, gnorm2)
    delta = relative_change(st.signal) if st.signal.step_count >= 2 else None
    return loss, grad, gnorm2, delta


def _push_pull(ctx: WorkerContext, st: _WorkerState, step: int, kind: int, values):
    """One aggregation exchange: push a vector, receive the aggregate."""
    yield _send(st, Envelope(kind, ctx.worker_id, step, wire.vector_to_bytes(values)))
    env = yield from _recv(st, wire.GLOBAL_PARAMS)
    return wire.bytes_to_vector(env.payload, param_count(ctx.spec))


def _duration(ctx: WorkerContext, synced: bool, t0: float) -> float:
    costs = ctx.logical_costs
    if costs is not None:
        return costs.compute * costs.delay + (costs.comm if synced else 0.0)
    return time.monotonic() - t0


def _emit_row(ctx: WorkerContext, st: _WorkerState, rec: MetricsRecord):
    payload = wire.json_payload({"type": "row", **rec.to_dict()})
    yield _send(st, Envelope(wire.ITERATION_REPORT, ctx.worker_id, rec.step, payload))
    if isinstance(ctx.strategy, SspConfig):
        env = yield from _recv(st, wire.ITERATION_REPORT)
        st.last_min = max(st.last_min, env.step)


def _emit_eval(ctx: WorkerContext, st: _WorkerState, step: int):
    if ctx.worker_id != 0 or ctx.test_set is None:
        return
    if (step + 1) % ctx.eval_every != 0 and step != ctx.budget_steps - 1:
        return
    scores = evaluate(st.params, ctx.test_set, ctx.spec)
    payload = wire.json_payload({"type": "eval", "step": step, **scores})
    yield _send(st, Envelope(wire.ITERATION_REPORT, ctx.worker_id, step, payload))
    if isinstance(ctx.strategy, SspConfig):
        env = yield from _recv(st, wire.ITERATION_REPORT)
        st.last_min = max(st.last_min, env.step)


def _finish_step(ctx, st, step, decision, loss, gnorm2, delta, lr, synced, sent0, recv0, t0):
    rec = MetricsRecord(
        step=step,
        worker_id=ctx.worker_id,
        loss=float(loss),
        grad_norm_sq=float(gnorm2),
        ewma=float(st.signal.ewma_current),
        delta_g=None if delta is None else float(delta),
        decision=decision,
        bytes_sent=st.sent_bytes - sent0,
        bytes_received=st.recv_bytes - recv0,
        step_duration=_duration(ctx, synced, t0),
        lr=float(lr),
    )
    yield from _emit_row(ctx, st, rec)
    yield from _emit_eval(ctx, st, step)
    if ctx.capture is not None and ctx.capture(step):
        st.trajectory.append((step, st.params.values.copy()))
    st.steps_done = step + 1


def _bsp_step(ctx: WorkerContext, st: _WorkerState, step: int):
    cfg = ctx.strategy
    sent0, recv0 = st.sent_bytes, st.recv_bytes
    t0 = time.monotonic()
    batch = ctx.sampler.next_batch()
    if ctx.injection is not None:
        batch = yield from _injection_exchange(ctx, st, step, batch)
    yield ("work", 1.0, step)
    loss, grad, gnorm2, delta = _grad_and_signal(ctx, st, batch)
    lr = ctx.lr_for(step)
    if cfg.aggregation == "params":
        st.params = sgd_step(st.params, grad, lr)
        mean = yield from _push_pull(ctx, st, step, wire.PUSH_PARAMS, st.params.values)
        st.params = ParamVector(mean, st.params.layout)
    else:
        mean_grad = yield from _push_pull(ctx, st, step, wire.PUSH_GRAD, grad)
        st.params = sgd_step(st.params, mean_grad, lr)
    yield from _finish_step(
        ctx, st, step, "sync", loss, gnorm2, delta, lr, True, sent0, recv0, t0
    )


def _selsync_step(ctx: WorkerContext, st: _WorkerState, step: int):
    cfg = ctx.strategy
    threshold = DeltaThreshold(cfg.delta)
    sent0, recv0 = st.sent_bytes, st.recv_bytes
    t0 = time.monotonic()
    batch = ctx.sampler.next_batch()
    if ctx.injection is not None:
        batch = yield from _injection_exchange(ctx, st, step, batch)
    yield ("work", 1.0, step)
    loss, grad, gnorm2, delta = _grad_and_signal(ctx, st, batch)
    lr = ctx.lr_for(step)
    if cfg.aggregation == "params":
        # local update lands before the flag exchange; a sync round then
        # replaces it with the cluster mean
        st.params = sgd_step(st.params, grad, lr)
    own_bit = decide(st.signal, threshold) == "sync"
    word = wire.flag_word(ctx.n_workers, {ctx.worker_id} if own_bit else set())
    yield _send(st, Envelope(wire.FLAG_BITS, ctx.worker_id, step, word))
    env = yield from _recv(st, wire.FLAG_BITS)
    synced = wire.any_flag(env.payload)
    if synced:
        if cfg.aggregation == "params":
            mean = yield from _push_pull(
                ctx, st, step, wire.PUSH_PARAMS, st.params.values
            )
            st.params = ParamVector(mean, st.params.layout)
        else:
            mean_grad = yield from _push_pull(ctx, st, step, wire.PUSH_GRAD, grad)
            st.params = sgd_step(st.params, mean_grad, lr)
    elif cfg.aggregation == "grads":
        st.params = sgd_step(st.params, grad, lr)
    decision = "sync" if synced else "local"
    yield from _finish_step(
        ctx, st, step, decision, loss, gnorm2, delta, lr, synced, sent0, recv0, t0
    )


def _fedavg_step(ctx: WorkerContext, st: _WorkerState, step: int):
    cfg = ctx.strategy
    interval = fedavg_interval(cfg, ctx.steps_per_epoch)
    sent0, recv0 = st.sent_bytes, st.recv_bytes
    t0 = time.monotonic()
    batch = ctx.sampler.next_batch()
    if ctx.injection is not None:
        batch = yield from _injection_exchange(ctx, st, step, batch)
    yield ("work", 1.0, step)
    loss, grad, gnorm2, delta = _grad_and_signal(ctx, st, batch)
    lr = ctx.lr_for(step)
    st.params = sgd_step(st.params, grad, lr)
    synced = (step + 1) % interval == 0
    if synced:
        round_index = (step + 1) // interval - 1
        participants = fedavg_participants(
            ctx.n_workers, cfg.fraction, cfg.participant_seed, round_index
        )
        if ctx.worker_id in participants:
            yield _send(
                st,
                Envelope(
                    wire.PUSH_PARAMS,
                    ctx.worker_id,
                    step,
                    wire.vector_to_bytes(st.params.values),
                ),
            )
        # everyone pulls the averaged model, participant or not
        yield _send(st, Envelope(wire.PULL_REQUEST, ctx.worker_id, step, b""))
        env = yield from _recv(st, wire.GLOBAL_PARAMS)
        mean = wire.bytes_to_vector(env.payload, param_count(ctx.spec))
        st.params = ParamVector(mean, st.params.layout)
    decision = "sync" if synced else "local"
    yield from _finish_step(
        ctx, st, step, decision, loss, gnorm2, delta, lr, synced, sent0, recv0, t0
    )


def _ssp_step(ctx: WorkerContext, st: _WorkerState, step: int):
    cfg = ctx.strategy
    # staleness gate: the server's min only ever trails the true minimum,
    # so blocking on the stale view can never let the bound slip
    while not st.stop_pending and step - st.last_min > cfg.staleness:
        yield _send(st, Envelope(wire.ITERATION_REPORT, ctx.worker_id, step, b""))
        env = yield from _recv(st, wire.ITERATION_REPORT)
        st.last_min = max(st.last_min, env.step)
    if st.stop_pending:
        return
    sent0, recv0 = st.sent_bytes, st.recv_bytes
    t0 = time.monotonic()
    batch = ctx.sampler.next_batch()
    # the work op leads the step so that the scheduler's view of the
    # worker's current iteration advances the moment the gate is cleared
    yield ("work", 1.0, step)
    yield _send(st, Envelope(wire.PULL_REQUEST, ctx.worker_id, step, b""))
    env = yield from _recv(st, wire.GLOBAL_PARAMS)
    st.params = ParamVector(
        wire.bytes_to_vector(env.payload, param_count(ctx.spec)), st.params.layout
    )
    loss, grad, gnorm2, delta = _grad_and_signal(ctx, st, batch)
    lr = ctx.lr_for(step)
    yield _send(
        st, Envelope(wire.PUSH_GRAD, ctx.worker_id, step, wire.vector_to_bytes(grad))
    )
    env = yield from _recv(st, wire.ITERATION_REPORT)
    st.last_min = max(st.last_min, env.step)
    st.params = sgd_step(st.params, grad, lr)
    yield from _finish_step(
        ctx, st, step, "local", loss, gnorm2, delta, lr, True, sent0, recv0, t0
    )


_STEP_FNS = {
    BspConfig: _bsp_step,
    SelSyncConfig: _selsync_step,
    FedAvgConfig: _fedavg_step,
    SspConfig: _ssp_step,
}


def run_worker(ctx: WorkerContext) -> Iterator:
    """The complete life of one worker: bootstrap, steps, final dump.

    Returns (via StopIteration) a report dict with the worker's byte
    counters, completed step count, and any captured parameter snapshots.
    """
    if isinstance(ctx.strategy, SspConfig) and ctx.injection is not None:
        raise ConfigError("batch injection requires lockstep steps")
    st = _WorkerState(ctx)
    yield from _bootstrap(ctx, st)
    step_fn = _STEP_FNS[type(ctx.strategy)]
    for step in range(ctx.budget_steps):
        if st.stop_pending:
            break
        yield from step_fn(ctx, st, step)
    yield (
        "send",
        Envelope(
            wire.SHUTDOWN,
            ctx.worker_id,
            max(st.steps_done - 1, 0),
            wire.vector_to_bytes(st.params.values),
        ),
    )
    return {
        "worker_id": ctx.worker_id,
        "steps_done": st.steps_done,
        "bytes_sent": st.sent_bytes,
        "bytes_received": st.recv_bytes,
        "trajectory": st.trajectory,
    }
