"""Relative gradient-change detector and a curvature probe.

Each worker keeps a small EWMA state over its squared gradient norms. The
relative change of that smoothed series decides whether the worker raises
its synchronization flag. The Hessian eigenvalue probe is a test oracle
used to check that the signal tracks loss-surface curvature; it is not run
in production loops.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, SignalError
from .model import Batch, ModelSpec, ParamVector, forward_backward, param_count


def default_smoothing(n_workers: int) -> float:
    """Smoothing factor scaled to cluster size, clamped to [0.01, 1.0].

    A single worker gets 0.05 so the series is not over-damped.
    """
    if n_workers < 1:
        raise ConfigError(f"n_workers must be positive, got {n_workers}")
    if n_workers == 1:
        return 0.05
    return float(min(1.0, max(0.01, n_workers / 100.0)))


@dataclass(frozen=True)
class DeltaThreshold:
    delta: float

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta < 0.0:
            raise SignalError(f"delta must be finite and >= 0, got {self.delta}")


@dataclass(frozen=True)
class GradSignalState:
    """EWMA pair over observed squared gradient norms.

    ewma_previous lags ewma_current by exactly one observation. step_count
    is the number of observations so far; the first warmup observations
    force a sync decision regardless of the threshold.
    """

    smoothing: float
    warmup: int = 25
    ewma_current: float = 0.0
    ewma_previous: float = 0.0
    step_count: int = 0
    max_delta_seen: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.smoothing <= 1.0):
            raise SignalError(f"smoothing must be in (0, 1], got {self.smoothing}")
        if self.warmup < 1:
            raise SignalError(f"warmup must be >= 1, got {self.warmup}")


def observe(state: GradSignalState, grad_norm_sq: float) -> GradSignalState:
    """Fold one squared gradient norm into the EWMA pair; returns the new state."""
    x = float(grad_norm_sq)
    if np.isnan(x):
        raise SignalError("observed a NaN gradient norm")
    if x < 0.0:
        raise SignalError(f"squared norm cannot be negative, got {x}")
    if state.step_count == 0:
        new_current = x  # seed the series at the first observation
    else:
        new_current = state.smoothing * x + (1.0 - state.smoothing) * state.ewma_current
    out = replace(
        state,
        ewma_previous=state.ewma_current,
        ewma_current=new_current,
        step_count=state.step_count + 1,
    )
    if out.step_count >= 2 and out.step_count > out.warmup:
        out = replace(out, max_delta_seen=max(out.max_delta_seen, relative_change(out)))
    return out


def relative_change(state: GradSignalState) -> float:
    """|ewma_current - ewma_previous| / ewma_previous.

    Both EWMAs zero means a genuinely flat signal: 0.0. A zero previous
    value with a nonzero current one returns +inf, which forces a sync at
    any threshold.
    """
    if state.step_count < 2:
        raise SignalError("relative change needs at least two observations")
    prev, cur = state.ewma_previous, state.ewma_current
    if prev == 0.0:
        return 0.0 if cur == 0.0 else float("inf")
    return abs((cur - prev) / prev)


def decide(state: GradSignalState, threshold: DeltaThreshold) -> str:
    """'sync' or 'local'. Warmup steps always sync; the comparison is inclusive."""
    if state.step_count < 1:
        raise SignalError("decide called before any observation")
    if state.step_count <= state.warmup:
        return "sync"
    return "sync" if relative_change(state) >= threshold.delta else "local"


def replay_decisions(deltas: list[float | None], warmup: int, delta: float) -> int:
    """Count sync decisions for a recorded relative-change trace at one threshold.

    Entries recorded during warmup carry None; those steps sync by rule.
    Counterfactual replay only: the trace itself came from a single run.
    """
    if warmup < 1:
        raise ConfigError(f"warmup must be >= 1, got {warmup}")
    syncs = 0
    for i, d in enumerate(deltas):
        if i < warmup:
            syncs += 1
        elif d is not None and d >= delta:
            syncs += 1
    return syncs


def top_eigenvalue(
    matvec, dim: int, iters: int = 100, tol: float = 1e-6, seed: int = 0
) -> float:
    """Power iteration with Rayleigh-quotient convergence; returns the signed estimate."""
    if dim < 1:
        raise ConfigError(f"dim must be positive, got {dim}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    estimate = 0.0
    have_estimate = False
    for _ in range(iters):
        hv = np.asarray(matvec(u), dtype=np.float64)
        if not np.all(np.isfinite(hv)):
            raise SignalError("non-finite value in eigenvalue iteration")
        ray = float(u @ hv)
        if have_estimate and abs(ray - estimate) < tol:
            return ray
        estimate = ray
        have_estimate = True
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0  # operator annihilated the probe; curvature is flat
        u = hv / norm
    return estimate


def hessian_top_eigenvalue(
    params: ParamVector,
    batch: Batch,
    spec: ModelSpec,
    iters: int = 100,
    tol: float = 1e-6,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest-magnitude Hessian eigenvalue of the batch loss at params.

    Hessian-vector products come from central differences of the analytic
    gradient, so cost is two backprops per iteration. Guarded to small
    models; this is a measurement tool, not a training component.
    """
    if param_count(spec) > 10_000:
        raise ConfigError("eigenvalue probe is limited to models with <= 10000 parameters")
    if eps <= 0.0:
        raise ConfigError(f"eps must be positive, got {eps}")

    base = params.values

    def hvp(u: np.ndarray) -> np.ndarray:
        shifted = ParamVector(base + eps * u, params.layout)
        _, g_plus = forward_backward(shifted, batch, spec)
        shifted = ParamVector(base - eps * u, params.layout)
        _, g_minus = forward_backward(shifted, batch, spec)
        return (g_plus - g_minus) / (2.0 * eps)

    return top_eigenvalue(hvp, base.size, iters=iters, tol=tol, seed=seed)
