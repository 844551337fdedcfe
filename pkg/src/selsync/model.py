"""Small differentiable classifiers: logistic regression and MLPs.

Everything is float64 and seeded, so two processes given the same spec and
seed produce bit-identical parameters and gradients. Parameters live in a
single flat vector with an explicit layout so they can be shipped over a
wire or averaged without knowing the architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus init seed. hidden_dims=() means logistic regression."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class Batch:
    """A minibatch. source_chunk records which partition chunk it came from."""

    features: np.ndarray  # (b, input_dim) float64
    labels: np.ndarray  # (b,) int64
    source_chunk: int = -1

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus (offset, shape) layout per tensor."""

    values: np.ndarray
    layout: tuple[tuple[int, tuple[int, ...]], ...]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def tensor(self, i: int) -> np.ndarray:
        off, shape = self.layout[i]
        return self.values[off : off + int(np.prod(shape))].reshape(shape)


def layer_dims(spec: ModelSpec) -> list[tuple[int, int]]:
    widths = [spec.input_dim, *spec.hidden_dims, spec.num_classes]
    return list(zip(widths[:-1], widths[1:]))


def param_layout(spec: ModelSpec) -> tuple[tuple[int, tuple[int, ...]], ...]:
    layout = []
    off = 0
    for fan_in, fan_out in layer_dims(spec):
        layout.append((off, (fan_in, fan_out)))
        off += fan_in * fan_out
        layout.append((off, (fan_out,)))
        off += fan_out
    return tuple(layout)


def param_count(spec: ModelSpec) -> int:
    return sum(fi * fo + fo for fi, fo in layer_dims(spec))


def init_params(spec: ModelSpec) -> ParamVector:
    """Scaled-uniform init: each weight ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(spec.init_seed)
    layout = param_layout(spec)
    values = np.zeros(param_count(spec), dtype=np.float64)
    for i, (fan_in, fan_out) in enumerate(layer_dims(spec)):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        off, shape = layout[2 * i]
        values[off : off + fan_in * fan_out] = w.ravel()
        # biases stay zero
    return ParamVector(values, layout)


def _unpack(params: ParamVector, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    dims = layer_dims(spec)
    if len(params.layout) != 2 * len(dims):
        raise ConfigError("parameter layout does not match the model spec")
    return [(params.tensor(2 * i), params.tensor(2 * i + 1)) for i in range(len(dims))]


def _validate_batch(batch: Batch, spec: ModelSpec) -> None:
    if batch.features.ndim != 2 or batch.features.shape[1] != spec.input_dim:
        raise ConfigError(
            f"batch features {batch.features.shape} do not match input_dim {spec.input_dim}"
        )
    if len(batch) == 0:
        raise ConfigError("empty batch")
    if batch.labels.shape != (len(batch),):
        raise ConfigError("labels shape does not match batch size")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ConfigError("label out of range for num_classes")


def forward_logits(params: ParamVector, features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Logits for a feature matrix; no softmax applied."""
    a = np.asarray(features, dtype=np.float64)
    tensors = _unpack(params, spec)
    for w, b in tensors[:-1]:
        z = a @ w + b
        a = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
    w, b = tensors[-1]
    return a @ w + b


def forward_loss(params: ParamVector, batch: Batch, spec: ModelSpec) -> float:
    """Mean cross-entropy of the batch, computed with a stabilized log-sum-exp."""
    _validate_batch(batch, spec)
    logits = forward_logits(params, batch.features, spec)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(batch)), batch.labels]
    return float(np.mean(log_z - picked))


def forward_backward(
    params: ParamVector, batch: Batch, spec: ModelSpec
) -> tuple[float, np.ndarray]:
    """Loss and analytic gradient (flat, same layout as params) for one batch."""
    _validate_batch(batch, spec)
    tensors = _unpack(params, spec)
    x = np.asarray(batch.features, dtype=np.float64)
    b = len(batch)

    acts = [x]  # post-activation outputs, acts[0] is the input
    zs = []
    a = x
    for w, bias in tensors[:-1]:
        z = a @ w + bias
        zs.append(z)
        a = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
        acts.append(a)
    w_out, b_out = tensors[-1]
    logits = a @ w_out + b_out

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_z = np.log(exp.sum(axis=1))
    picked = shifted[np.arange(b), batch.labels]
    loss = float(np.mean(log_z - picked))

    grad = np.zeros_like(params.values)
    d_logits = probs.copy()
    d_logits[np.arange(b), batch.labels] -= 1.0
    d_logits /= b

    n_layers = len(tensors)
    d_out = d_logits
    for i in range(n_layers - 1, -1, -1):
        w, _ = tensors[i]
        a_prev = acts[i]
        off_w, shape_w = params.layout[2 * i]
        off_b, _ = params.layout[2 * i + 1]
        grad[off_w : off_w + w.size] = (a_prev.T @ d_out).ravel()
        grad[off_b : off_b + w.shape[1]] = d_out.sum(axis=0)
        if i > 0:
            d_a = d_out @ w.T
            z = zs[i - 1]
            if spec.activation == "relu":
                d_a[z <= 0.0] = 0.0
            else:
                d_a *= 1.0 - np.tanh(z) ** 2
            d_out = d_a
    return loss, grad


def finite_diff_grad(
    params: ParamVector, batch: Batch, spec: ModelSpec, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time. Test oracle, O(P) forwards."""
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"eps must be in (0, 1e-2], got {eps}")
    out = np.zeros_like(params.values)
    probe = params.copy()
    for j in range(params.values.size):
        orig = probe.values[j]
        probe.values[j] = orig + eps
        lp = forward_loss(probe, batch, spec)
        probe.values[j] = orig - eps
        lm = forward_loss(probe, batch, spec)
        probe.values[j] = orig
        out[j] = (lp - lm) / (2.0 * eps)
    return out


def sgd_step(params: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    """w - lr * g as a new vector; the input is left unmodified."""
    if grad.shape != params.values.shape:
        raise ConfigError("gradient shape does not match parameter vector")
    if lr < 0.0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    return ParamVector(params.values - lr * grad, params.layout)


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant decay: lr = initial * prod(factor for boundary <= position).

    mode chooses whether milestone boundaries are step indices or epoch
    indices. A recurring decay (say x0.8 every 2000 steps) is expressed by
    listing each boundary explicitly.
    """

    initial_lr: float
    milestones: tuple[tuple[int, float], ...] = ()
    mode: str = "per_step"

    def __post_init__(self):
        object.__setattr__(
            self, "milestones", tuple((int(b), float(f)) for b, f in self.milestones)
        )
        if self.initial_lr <= 0.0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.mode not in ("per_step", "per_epoch"):
            raise ConfigError(f"schedule mode must be per_step or per_epoch, got {self.mode!r}")
        bounds = [b for b, _ in self.milestones]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ConfigError("milestone boundaries must be strictly increasing")
        if any(f <= 0.0 for _, f in self.milestones):
            raise ConfigError("milestone factors must be positive")


def lr_at(schedule: LrSchedule, step: int, epoch: int) -> float:
    pos = step if schedule.mode == "per_step" else epoch
    lr = schedule.initial_lr
    for boundary, factor in schedule.milestones:
        if boundary <= pos:
            lr *= factor
    return lr
