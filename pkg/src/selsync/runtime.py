"""The parameter server and the deterministic in-process cluster.

The server is a reactive state machine: handle(envelope) returns the reply
envelopes to deliver, so the same server instance runs under the in-process
scheduler and the socket transport. The deterministic scheduler advances
worker generators one operation at a time in a seeded order, making an
entire run a pure function of its configuration and seeds.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ProtocolError
from .metrics import MetricsRecord
from .model import (
    LrSchedule,
    ModelSpec,
    ParamVector,
    init_params,
    lr_at,
    param_count,
    param_layout,
    sgd_step,
)
from .strategies import (
    BspConfig,
    FedAvgConfig,
    SelSyncConfig,
    SspConfig,
    StrategyConfig,
    WorkerContext,
    aggregate_mean,
    fedavg_interval,
    fedavg_participants,
    run_worker,
)
from . import wire
from .wire import Envelope

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimTransport:
    """In-process deterministic transport; the seed orders the interleaving."""

    schedule_seed: int = 0


@dataclass(frozen=True)
class SocketTransport:
    host: str = "127.0.0.1"
    port: int = 0  # 0 binds an ephemeral port


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int
    transport: Union[SimTransport, SocketTransport] = field(default_factory=SimTransport)
    step_timeout: float = 30.0
    compute_cost: float = 1.0
    comm_cost: float = 5.0
    delay_factors: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ConfigError(f"cluster needs at least one worker, got {self.n_workers}")
        if self.step_timeout <= 0:
            raise ConfigError("step_timeout must be positive")
        if self.compute_cost < 0 or self.comm_cost < 0:
            raise ConfigError("logical costs must be non-negative")
        if self.delay_factors is not None:
            if len(self.delay_factors) != self.n_workers:
                raise ConfigError(
                    f"{len(self.delay_factors)} delay factors for {self.n_workers} workers"
                )
            if any(d <= 0 for d in self.delay_factors):
                raise ConfigError("delay factors must be positive")

    def delay_for(self, worker_id: int) -> float:
        if self.delay_factors is None:
            return 1.0
        return self.delay_factors[worker_id]


class ParameterServer:
    """Holds the authoritative parameters and reacts to worker envelopes.

    All mutations happen inside handle(), which the transports call from a
    single logical thread of control, so no locking is needed here.
    """

    def __init__(
        self,
        spec: ModelSpec,
        strategy: StrategyConfig,
        n_workers: int,
        schedule: LrSchedule,
        steps_per_epoch: int,
        patience: int = 10,
    ):
        self.spec = spec
        self.strategy = strategy
        self.n = n_workers
        self.schedule = schedule
        self.steps_per_epoch = steps_per_epoch
        self.patience = patience
        self.layout = param_layout(spec)
        self.expected_len = param_count(spec)
        self.params = init_params(spec)
        # frozen snapshot: every bootstrap reply carries these exact bytes
        self.init_payload = wire.vector_to_bytes(self.params.values)

        self.bootstrapped: set[int] = set()
        # shares relayed to a worker that has not joined yet wait here
        self.share_backlog: dict[int, list[Envelope]] = {}
        self.vec_buf: dict[int, dict[int, np.ndarray]] = {}
        self.vec_kind: dict[int, int] = {}
        self.pull_buf: dict[int, list[int]] = {}
        self.flag_buf: dict[int, dict[int, bytes]] = {}
        self.iter_table: dict[int, int] = {w: 0 for w in range(n_workers)}
        self.pending_gates: list[tuple[int, int]] = []
        self.rows: list[MetricsRecord] = []
        self.row_keys: set[tuple[int, int]] = set()
        self.eval_rows: list[dict] = []
        self.round_log: list[dict] = []
        self.applied_updates = 0
        self.best_metric: Optional[float] = None
        self.stale_evals = 0
        self.stopping = False
        self.stop_reason = "budget"
        self.shutdown_sent: set[int] = set()
        self.done: set[int] = set()
        self.finals: dict[int, np.ndarray] = {}
        self.finished = False
        # traffic accounting per (kind, worker): [frame count, payload bytes]
        self.received: dict[tuple[int, int], list[int]] = {}
        self.sent: dict[tuple[int, int], list[int]] = {}
        if isinstance(strategy, FedAvgConfig):
            self.interval = fedavg_interval(strategy, steps_per_epoch)

    # -- accounting ---------------------------------------------------------

    def _bump(self, table, kind: int, wid: int, payload_len: int) -> None:
        cell = table.setdefault((kind, wid), [0, 0])
        cell[0] += 1
        cell[1] += payload_len

    def stats(self, table, kind: int, wid: int) -> tuple[int, int]:
        return tuple(table.get((kind, wid), (0, 0)))

    def frame_bytes_from(self, wid: int) -> int:
        return sum(
            payload + wire.HEADER_SIZE * count
            for (k, w), (count, payload) in self.received.items()
            if w == wid
        )

    def frame_bytes_to(self, wid: int) -> int:
        return sum(
            payload + wire.HEADER_SIZE * count
            for (k, w), (count, payload) in self.sent.items()
            if w == wid
        )

    # -- dispatch -----------------------------------------------------------

    def handle(self, env: Envelope) -> list[tuple[int, Envelope]]:
        wid = env.sender
        if not (0 <= wid < self.n):
            raise ProtocolError(f"envelope from unknown worker {wid}")
        bootstrap = env.kind == wire.PULL_REQUEST and wid not in self.bootstrapped
        if env.kind in wire.COUNTED_KINDS and not bootstrap:
            self._bump(self.received, env.kind, wid, len(env.payload))

        replies: list[tuple[int, Envelope]] = []
        if bootstrap:
            self.bootstrapped.add(wid)
            replies.append(
                (wid, Envelope(wire.GLOBAL_PARAMS, wire.PS_SENDER, 0, self.init_payload))
            )
            for relay in self.share_backlog.pop(wid, []):
                self._bump(self.sent, relay.kind, wid, len(relay.payload))
                replies.append((wid, relay))
            return self._finish(replies, counted=False)

        handler = {
            wire.PULL_REQUEST: self._on_pull,
            wire.PUSH_PARAMS: self._on_push_vec,
            wire.PUSH_GRAD: self._on_push_grad,
            wire.FLAG_BITS: self._on_flags,
            wire.DATA_SHARE: self._on_share,
            wire.ITERATION_REPORT: self._on_report,
            wire.SHUTDOWN: self._on_worker_shutdown,
        }[env.kind]
        handler(env, replies)
        return self._finish(replies)

    def _finish(self, replies, counted=True):
        if self.stopping:
            stamped = []
            for dest, renv in replies:
                stamped.append((dest, renv))
                if dest not in self.shutdown_sent and dest not in self.done:
                    self.shutdown_sent.add(dest)
                    stamped.append((dest, Envelope(wire.SHUTDOWN, wire.PS_SENDER, 0, b"")))
            replies = stamped
        if counted:
            for dest, renv in replies:
                if renv.kind in wire.COUNTED_KINDS:
                    self._bump(self.sent, renv.kind, dest, len(renv.payload))
        return replies

    # -- per-kind handlers --------------------------------------------------

    def _vector(self, env: Envelope) -> np.ndarray:
        return wire.bytes_to_vector(env.payload, self.expected_len)

    def _lr_for(self, step: int) -> float:
        return lr_at(self.schedule, step, step // self.steps_per_epoch)

    def _on_pull(self, env, replies):
        if isinstance(self.strategy, SspConfig):
            payload = wire.vector_to_bytes(self.params.values)
            replies.append(
                (env.sender, Envelope(wire.GLOBAL_PARAMS, wire.PS_SENDER, env.step, payload))
            )
        elif isinstance(self.strategy, FedAvgConfig):
            self.pull_buf.setdefault(env.step, []).append(env.sender)
            self._try_fedavg_round(env.step, replies)
        else:
            raise ProtocolError(f"unexpected pull at step {env.step} from worker {env.sender}")

    def _buffer_vec(self, env) -> dict[int, np.ndarray]:
        buf = self.vec_buf.setdefault(env.step, {})
        kind = self.vec_kind.setdefault(env.step, env.kind)
        if kind != env.kind:
            raise ProtocolError(f"mixed push kinds in the round at step {env.step}")
        if env.sender in buf:
            raise ProtocolError(f"duplicate push from worker {env.sender} at step {env.step}")
        buf[env.sender] = self._vector(env)
        return buf

    def _on_push_vec(self, env, replies):
        if isinstance(self.strategy, SspConfig):
            raise ProtocolError("parameter pushes are not part of the asynchronous protocol")
        buf = self._buffer_vec(env)
        if isinstance(self.strategy, FedAvgConfig):
            self._try_fedavg_round(env.step, replies)
        elif len(buf) == self.n:
            self._close_round(env.step, replies)

    def _on_push_grad(self, env, replies):
        if isinstance(self.strategy, SspConfig):
            grad = self._vector(env)
            self.params = sgd_step(self.params, grad, self._lr_for(env.step))
            self.applied_updates += 1
            replies.append(
                (
                    env.sender,
                    Envelope(wire.ITERATION_REPORT, wire.PS_SENDER, self._min_iter(), b""),
                )
            )
            return
        buf = self._buffer_vec(env)
        if len(buf) == self.n:
            self._close_round(env.step, replies)

    def _close_round(self, step: int, replies):
        """All N vectors arrived: aggregate in worker id order, answer everyone."""
        buf = self.vec_buf.pop(step)
        kind = self.vec_kind.pop(step)
        order = sorted(buf)
        mean = aggregate_mean([ParamVector(buf[w], self.layout) for w in order])
        if kind == wire.PUSH_PARAMS:
            # gradient rounds leave the server copy alone: under gradient
            # aggregation the global state lives on the replicas
            self.params = mean
        payload = wire.vector_to_bytes(mean.values)
        for w in order:
            replies.append((w, Envelope(wire.GLOBAL_PARAMS, wire.PS_SENDER, step, payload)))
        self.round_log.append(
            {
                "step": step,
                "kind": "params" if kind == wire.PUSH_PARAMS else "grads",
                "participants": order,
            }
        )

    def _try_fedavg_round(self, step: int, replies):
        round_index = (step + 1) // self.interval - 1
        participants = fedavg_participants(
            self.n, self.strategy.fraction, self.strategy.participant_seed, round_index
        )
        pushed = self.vec_buf.get(step, {})
        pulls = self.pull_buf.get(step, [])
        if len(pushed) < len(participants) or len(pulls) < self.n:
            return
        if set(pushed) != set(participants):
            raise ProtocolError(f"round {round_index} pushes do not match the drawn participants")
        self.vec_buf.pop(step)
        self.vec_kind.pop(step)
        self.pull_buf.pop(step)
        mean = aggregate_mean([ParamVector(pushed[w], self.layout) for w in participants])
        self.params = mean
        payload = wire.vector_to_bytes(mean.values)
        for w in sorted(pulls):
            replies.append((w, Envelope(wire.GLOBAL_PARAMS, wire.PS_SENDER, step, payload)))
        self.round_log.append(
            {"step": step, "kind": "params", "participants": list(participants)}
        )

    def _on_flags(self, env, replies):
        if not isinstance(self.strategy, SelSyncConfig):
            raise ProtocolError("flag exchange outside selective synchronization")
        size = wire.flag_word_size(self.n)
        if len(env.payload) != size:
            raise ProtocolError(f"flag word of {len(env.payload)} bytes, expected {size}")
        buf = self.flag_buf.setdefault(env.step, {})
        if env.sender in buf:
            raise ProtocolError(f"duplicate flags from worker {env.sender} at step {env.step}")
        buf[env.sender] = env.payload
        if len(buf) == self.n:
            self.flag_buf.pop(env.step)
            word = wire.or_words(buf.values(), self.n)
            for w in range(self.n):
                replies.append((w, Envelope(wire.FLAG_BITS, wire.PS_SENDER, env.step, word)))

    def _on_share(self, env, replies):
        for w in range(self.n):
            if w == env.sender:
                continue
            relay = Envelope(wire.DATA_SHARE, env.sender, env.step, env.payload)
            if w in self.bootstrapped:
                replies.append((w, relay))
            else:
                self.share_backlog.setdefault(w, []).append(relay)

    def _min_iter(self) -> int:
        return min(self.iter_table.values())

    def _release_gates(self, replies):
        if not isinstance(self.strategy, SspConfig):
            return
        low = self._min_iter()
        still = []
        for wid, target in self.pending_gates:
            if self.stopping or target - low <= self.strategy.staleness:
                replies.append((wid, Envelope(wire.ITERATION_REPORT, wire.PS_SENDER, low, b"")))
            else:
                still.append((wid, target))
        self.pending_gates = still

    def _on_report(self, env, replies):
        if not env.payload:
            # staleness gate poll: answer when the slowest catches up
            if not isinstance(self.strategy, SspConfig):
                raise ProtocolError("empty report outside the asynchronous protocol")
            self.pending_gates.append((env.sender, env.step))
            self._release_gates(replies)
            return
        body = wire.payload_json(env.payload)
        kind = body.get("type")
        if kind == "row":
            key = (body["step"], body["worker_id"])
            if key in self.row_keys:
                raise ProtocolError(f"duplicate record for step {key[0]} worker {key[1]}")
            self.row_keys.add(key)
            self.rows.append(MetricsRecord.from_dict(body))
        elif kind == "eval":
            self.eval_rows.append({k: body[k] for k in ("step", "accuracy", "mean_loss")})
            self._update_patience(body["accuracy"])
        else:
            raise ProtocolError(f"unknown report type {kind!r}")
        if isinstance(self.strategy, SspConfig):
            if kind == "row":
                wid = body["worker_id"]
                self.iter_table[wid] = max(self.iter_table[wid], body["step"] + 1)
            self._release_gates(replies)
            replies.append(
                (
                    env.sender,
                    Envelope(wire.ITERATION_REPORT, wire.PS_SENDER, self._min_iter(), b""),
                )
            )

    def _update_patience(self, accuracy: float) -> None:
        if self.best_metric is None or accuracy > self.best_metric:
            self.best_metric = accuracy
            self.stale_evals = 0
            return
        self.stale_evals += 1
        if self.stale_evals >= self.patience and not self.stopping:
            # gates deferred at this moment are flushed by the caller, which
            # always runs a release pass after the patience update
            self.stopping = True
            self.stop_reason = "patience"
            logger.info("stopping: no improvement for %d evaluations", self.stale_evals)

    def _on_worker_shutdown(self, env, replies):
        self.finals[env.sender] = self._vector(env)
        self.done.add(env.sender)
        if isinstance(self.strategy, SspConfig) and not self.stopping:
            # the first worker to exhaust its budget ends the run for everyone
            self.stopping = True
            self.stop_reason = "ssp_budget"
            self._release_gates(replies)
        if len(self.done) == self.n:
            self.finished = True


@dataclass
class RunResult:
    rows: list[MetricsRecord]
    eval_rows: list[dict]
    finals: dict[int, np.ndarray]
    init_values: np.ndarray
    wall_time: float
    stop_reason: str
    ps: ParameterServer
    worker_reports: dict[int, dict]
    pick_trace: list[int]
    spread_max: int = 0
    spread_violations: int = 0


def verify_conservation(result: RunResult) -> None:
    """Cross-check the two independent traffic counters.

    Worker-side per-record byte columns must reproduce the server's per-kind
    accounting exactly, in both directions, for every worker.
    """
    ps = result.ps
    by_worker_sent: dict[int, int] = {}
    by_worker_recv: dict[int, int] = {}
    for rec in result.rows:
        by_worker_sent[rec.worker_id] = by_worker_sent.get(rec.worker_id, 0) + rec.bytes_sent
        by_worker_recv[rec.worker_id] = (
            by_worker_recv.get(rec.worker_id, 0) + rec.bytes_received
        )
    for w in range(ps.n):
        got = ps.frame_bytes_from(w)
        claimed = by_worker_sent.get(w, 0)
        if got != claimed:
            raise ProtocolError(
                f"worker {w}: records claim {claimed} bytes sent, server counted {got}"
            )
        put = ps.frame_bytes_to(w)
        claimed = by_worker_recv.get(w, 0)
        if put != claimed:
            raise ProtocolError(
                f"worker {w}: records claim {claimed} bytes received, server sent {put}"
            )


def run_simulation(
    ps: ParameterServer,
    contexts: list[WorkerContext],
    cluster: ClusterConfig,
    track_spread: Optional[int] = None,
) -> RunResult:
    """Advance all workers to completion under the deterministic scheduler.

    Each tick resumes the runnable worker with the smallest jittered clock,
    processes exactly one yielded operation, and executes any server reaction
    inline. Message delivery is FIFO per worker, and receiving an envelope
    advances the receiver's clock to at least the sender's send time.
    """
    if not isinstance(cluster.transport, SimTransport):
        raise ConfigError("run_simulation requires the deterministic transport")
    n = cluster.n_workers
    if len(contexts) != n:
        raise ConfigError(f"{len(contexts)} contexts for {n} workers")
    lockstep = not isinstance(ps.strategy, SspConfig)
    rng = np.random.default_rng(np.random.SeedSequence([cluster.transport.schedule_seed]))

    gens = [run_worker(ctx) for ctx in contexts]
    inbox: list[deque] = [deque() for _ in range(n)]
    clock = [0.0] * n
    awaiting = [False] * n
    done = [False] * n
    boot_seen = [False] * n
    executing = [0] * n  # last admitted step per worker
    completed = [0] * n  # steps finished, observed from the record stream
    last_stamp = [0.0] * n
    reports: dict[int, dict] = {}
    high_water: dict[int, float] = {}
    pick_trace: list[int] = []
    spread_max = 0
    spread_violations = 0

    def reply_stamp(dest: int, renv: Envelope, inbound_stamp: float, sender: int) -> float:
        if lockstep and renv.kind in (wire.GLOBAL_PARAMS, wire.FLAG_BITS):
            return high_water.get(renv.step, inbound_stamp)
        if dest != sender and renv.kind in (wire.ITERATION_REPORT, wire.SHUTDOWN):
            return max(inbound_stamp, last_stamp[dest])
        return inbound_stamp

    while not all(done):
        runnable = [w for w in range(n) if not done[w] and (not awaiting[w] or inbox[w])]
        if not runnable:
            waiting = {w: len(inbox[w]) for w in range(n) if not done[w]}
            raise ProtocolError(
                "cluster deadlock: workers awaiting with empty inboxes "
                f"{waiting}; server buffers: rounds={list(ps.vec_buf)}, "
                f"flags={list(ps.flag_buf)}, pulls={list(ps.pull_buf)}, "
                f"gates={ps.pending_gates}"
            )
        jitter = rng.random(len(runnable))
        pick = runnable[int(np.argmin([clock[w] + 1e-6 * j for w, j in zip(runnable, jitter)]))]
        pick_trace.append(pick)

        if awaiting[pick]:
            stamp, env = inbox[pick].popleft()
            clock[pick] = max(clock[pick], stamp)
            if env.kind == wire.GLOBAL_PARAMS:
                if boot_seen[pick]:
                    clock[pick] += cluster.comm_cost
                else:
                    boot_seen[pick] = True
            awaiting[pick] = False
            value = env
        else:
            value = None

        try:
            op = gens[pick].send(value)
        except StopIteration as stop:
            done[pick] = True
            reports[pick] = stop.value or {}
            continue

        tag = op[0]
        if tag == "recv":
            awaiting[pick] = True
        elif tag == "work":
            _, units, step = op
            clock[pick] += units * cluster.compute_cost * cluster.delay_for(pick)
            executing[pick] = step
        elif tag == "send":
            env = op[1]
            stamp = clock[pick]
            last_stamp[pick] = stamp
            if env.kind == wire.ITERATION_REPORT and env.payload:
                completed[pick] = max(completed[pick], env.step + 1)
            if lockstep:
                high_water[env.step] = max(high_water.get(env.step, 0.0), stamp)
            for dest, renv in ps.handle(env):
                inbox[dest].append((reply_stamp(dest, renv, stamp, pick), renv))
        else:
            raise ProtocolError(f"unknown worker operation {tag!r}")

        if track_spread is not None:
            # a worker may execute step i only while i is within the
            # staleness window of the slowest worker's finished count
            spread = max(0, max(executing) - min(completed))
            spread_max = max(spread_max, spread)
            if spread > track_spread:
                spread_violations += 1

    if not ps.finished:
        raise ProtocolError("all workers exited but the server saw fewer final dumps")
    return RunResult(
        rows=ps.rows,
        eval_rows=ps.eval_rows,
        finals=ps.finals,
        init_values=wire.bytes_to_vector(ps.init_payload),
        wall_time=max(clock) if clock else 0.0,
        stop_reason=ps.stop_reason,
        ps=ps,
        worker_reports=reports,
        pick_trace=pick_trace,
        spread_max=spread_max,
        spread_violations=spread_violations,
    )
