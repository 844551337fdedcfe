"""TCP transport: the same server and worker generators over real sockets.

The server runs an accept loop, one reader thread per connection, and a
single handler thread, so every state mutation stays serialized exactly as
under the deterministic scheduler. Workers run in their own threads and
drive the unchanged strategy generators; only the I/O differs.

The environment variable SELSYNC_PS_ADDR ("host:port") overrides the
configured server address for both binding and connecting.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time

from .errors import ConfigError, TransportError
from .runtime import ClusterConfig, ParameterServer, RunResult, SocketTransport
from .strategies import WorkerContext, run_worker
from . import wire

logger = logging.getLogger(__name__)

_CONNECT_RETRY = 0.02


def resolve_address(transport: SocketTransport) -> tuple[str, int]:
    override = os.environ.get("SELSYNC_PS_ADDR")
    if not override:
        return transport.host, transport.port
    host, sep, port = override.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"SELSYNC_PS_ADDR must be host:port, got {override!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad port in SELSYNC_PS_ADDR: {override!r}") from exc


def _read_exactly(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout as exc:
            raise TransportError(f"timed out waiting for {remaining} bytes") from exc
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class _Server:
    def __init__(self, ps: ParameterServer, host: str, port: int, timeout: float):
        self.ps = ps
        self.timeout = timeout
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(timeout)
        self.port = self.listener.getsockname()[1]
        self.inbound: queue.Queue = queue.Queue()
        self.conn_of: dict[int, socket.socket] = {}
        self.conns: list[socket.socket] = []
        self.readers: list[threading.Thread] = []
        self.error: Exception | None = None

    def _reader(self, conn: socket.socket) -> None:
        try:
            while True:
                env = wire.read_frame(lambda n: _read_exactly(conn, n))
                self.inbound.put(env)
        except (TransportError, OSError):
            # worker hung up or the socket was torn down under us; the
            # handler decides whether that was expected
            self.inbound.put(None)

    def serve(self) -> None:
        try:
            for _ in range(self.ps.n):
                conn, _addr = self.listener.accept()
                conn.settimeout(self.timeout)
                self.conns.append(conn)
                t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
                t.start()
                self.readers.append(t)
            hangups = 0
            while not self.ps.finished:
                try:
                    env = self.inbound.get(timeout=self.timeout)
                except queue.Empty:
                    raise TransportError("server idle past the step timeout") from None
                if env is None:
                    hangups += 1
                    if hangups > self.ps.n:
                        raise TransportError("all workers hung up before finishing")
                    continue
                if env.sender not in self.conn_of:
                    # first envelope on a link names the worker behind it
                    self.conn_of[env.sender] = self.conns[len(self.conn_of)]
                for dest, renv in self.ps.handle(env):
                    try:
                        self.conn_of[dest].sendall(wire.encode_frame(renv))
                    except OSError:
                        if dest not in self.ps.done:
                            raise
        except Exception as exc:  # surfaced by the orchestrator after join
            self.error = exc
        finally:
            for conn in self.conns:
                conn.close()
            self.listener.close()


def _worker_thread(ctx: WorkerContext, host: str, port: int, timeout: float, out: dict):
    gen = run_worker(ctx)
    deadline = time.monotonic() + timeout
    sock = None
    while sock is None:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.monotonic() > deadline:
                raise TransportError(f"worker {ctx.worker_id} could not reach {host}:{port}")
            time.sleep(_CONNECT_RETRY)
    sock.settimeout(timeout)
    try:
        value = None
        while True:
            try:
                op = gen.send(value)
            except StopIteration as stop:
                out[ctx.worker_id] = stop.value or {}
                return
            tag = op[0]
            if tag == "send":
                sock.sendall(wire.encode_frame(op[1]))
                value = None
            elif tag == "recv":
                value = wire.read_frame(lambda n: _read_exactly(sock, n))
            elif tag == "work":
                value = None  # real compute already happened inside the generator
            else:
                raise TransportError(f"unknown worker operation {tag!r}")
    finally:
        sock.close()


def run_sockets(
    ps: ParameterServer, contexts: list[WorkerContext], cluster: ClusterConfig
) -> RunResult:
    """Execute a full run over TCP and assemble the same result shape."""
    if not isinstance(cluster.transport, SocketTransport):
        raise ConfigError("run_sockets requires the socket transport")
    if len(contexts) != cluster.n_workers:
        raise ConfigError(f"{len(contexts)} contexts for {cluster.n_workers} workers")
    host, port = resolve_address(cluster.transport)
    server = _Server(ps, host, port, cluster.step_timeout)
    started = time.monotonic()
    server_thread = threading.Thread(target=server.serve, daemon=True)
    server_thread.start()

    reports: dict[int, dict] = {}
    failures: list[Exception] = []

    def run_one(ctx: WorkerContext):
        try:
            _worker_thread(ctx, host, server.port, cluster.step_timeout, reports)
        except Exception as exc:
            failures.append(exc)

    threads = [threading.Thread(target=run_one, args=(ctx,), daemon=True) for ctx in contexts]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=cluster.step_timeout * 4)
        if t.is_alive():
            failures.append(TransportError("worker thread did not finish"))
    server_thread.join(timeout=cluster.step_timeout * 4)
    if server.error is not None:
        raise server.error
    if failures:
        raise failures[0]
    if not ps.finished:
        raise TransportError("run ended before the server saw every final dump")
    return RunResult(
        rows=ps.rows,
        eval_rows=ps.eval_rows,
        finals=ps.finals,
        init_values=wire.bytes_to_vector(ps.init_payload),
        wall_time=time.monotonic() - started,
        stop_reason=ps.stop_reason,
        ps=ps,
        worker_reports=reports,
        pick_trace=[],
    )
