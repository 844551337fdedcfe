"""Dataset generation, partition planning, and cross-worker sample injection.

Partition planning is a one-time cost paid before training starts. The
trainers only ever see samplers built from frozen plans; a module-level
counter lets tests assert that no plan is recomputed mid-run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import Batch

logger = logging.getLogger(__name__)

_plan_calls = 0


def plan_call_count() -> int:
    """How many times any planning routine has run in this process."""
    return _plan_calls


def _count_plan_call() -> None:
    global _plan_calls
    _plan_calls += 1


@dataclass
class Dataset:
    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("labels length does not match features")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label out of range")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def generate_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    seed: int,
    center_seed: int | None = None,
    split: str = "train",
) -> Dataset:
    """Gaussian clusters with unit within-class std and well-separated centers.

    Centers are standard-normal draws rescaled so the minimum pairwise
    distance is 4.2. center_seed lets two splits (train/test) share centers
    while drawing disjoint sample noise from different seeds.
    """
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise ConfigError("need num_classes >= 2, per_class >= 1, dim >= 1")
    center_rng = np.random.default_rng(seed if center_seed is None else center_seed)
    centers = center_rng.standard_normal((num_classes, dim))
    diffs = centers[:, None, :] - centers[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=2))
    min_dist = dists[~np.eye(num_classes, dtype=bool)].min()
    if min_dist == 0.0:
        raise ConfigError("degenerate center draw")
    centers *= 4.2 / min_dist

    rng = np.random.default_rng(seed)
    feats = np.concatenate(
        [centers[c] + rng.standard_normal((per_class, dim)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    order = rng.permutation(len(labels))
    return Dataset(feats[order], labels[order], num_classes, split)


def make_blob_splits(
    num_classes: int, train_per_class: int, test_per_class: int, dim: int, seed: int
) -> tuple[Dataset, Dataset]:
    """Train and test splits over the same cluster centers, disjoint noise."""
    s_centers, s_train, s_test = (int(s) for s in np.random.SeedSequence(seed).generate_state(3))
    train = generate_blobs(num_classes, train_per_class, dim, s_train, s_centers, "train")
    test = generate_blobs(num_classes, test_per_class, dim, s_test, s_centers, "test")
    return train, test


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write `label,f0,...` rows plus a .meta.json sidecar with class/dim info."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
        for y, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(y)] + [f"{v:.17g}" for v in row])
    meta = {"num_classes": dataset.num_classes, "dim": dataset.dim, "split": dataset.split}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def load_csv(path: str | Path) -> Dataset:
    path = Path(path)
    side = _sidecar(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    if not side.exists():
        raise ConfigError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    rows = []
    labels = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ConfigError(f"malformed dataset header in {path}")
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 1:
                raise ConfigError(f"{path}:{lineno}: expected {width + 1} columns")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    if width != int(meta["dim"]):
        raise ConfigError(f"{path}: header width {width} does not match sidecar dim {meta['dim']}")
    return Dataset(
        np.array(rows, dtype=np.float64).reshape(len(rows), width),
        np.array(labels, dtype=np.int64),
        int(meta["num_classes"]),
        meta.get("split", "train"),
    )


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta.json")


# ---------------------------------------------------------------------------
# Chunking and partition plans


@dataclass(frozen=True)
class ChunkSplit:
    """A fixed global shuffle cut into contiguous near-equal chunks."""

    permutation: np.ndarray  # dataset indices after the global shuffle
    bounds: tuple[tuple[int, int], ...]  # half-open [start, end) per chunk

    def chunk_indices(self, chunk: int) -> np.ndarray:
        s, e = self.bounds[chunk]
        return self.permutation[s:e]

    @property
    def n_chunks(self) -> int:
        return len(self.bounds)


def split_chunks(n_samples: int, n_chunks: int, seed: int) -> ChunkSplit:
    """One seeded shuffle, then contiguous chunks whose sizes differ by at most 1."""
    _count_plan_call()
    if n_chunks < 1:
        raise ConfigError(f"n_chunks must be positive, got {n_chunks}")
    if n_chunks > n_samples:
        raise ConfigError(f"cannot cut {n_samples} samples into {n_chunks} chunks")
    perm = np.random.default_rng(seed).permutation(n_samples)
    base, extra = divmod(n_samples, n_chunks)
    bounds = []
    start = 0
    for c in range(n_chunks):
        size = base + (1 if c < extra else 0)
        bounds.append((start, start + size))
        start += size
    return ChunkSplit(perm, tuple(bounds))


@dataclass(frozen=True)
class PartitionPlan:
    """The sequence of chunks one worker traverses each epoch.

    chunk_bounds is filled in once the dataset's chunk split is known; the
    order itself depends only on (worker_id, N).
    """

    worker_id: int
    chunk_order: tuple[int, ...]
    chunk_bounds: tuple[tuple[int, int], ...] | None = None


def bind_plan(plan: PartitionPlan, split: ChunkSplit) -> PartitionPlan:
    if any(c >= split.n_chunks for c in plan.chunk_order):
        raise ConfigError("plan references a chunk the split does not have")
    return PartitionPlan(plan.worker_id, plan.chunk_order, split.bounds)


def plan_defdp(worker_id: int, n_workers: int) -> PartitionPlan:
    """Default partitioning: every worker owns exactly its own chunk."""
    _count_plan_call()
    _check_worker(worker_id, n_workers)
    return PartitionPlan(worker_id, (worker_id,))


def plan_seldp(worker_id: int, n_workers: int) -> PartitionPlan:
    """Rotation partitioning: worker i visits chunks i, i+1, ... mod N each epoch."""
    _count_plan_call()
    _check_worker(worker_id, n_workers)
    return PartitionPlan(worker_id, tuple((worker_id + k) % n_workers for k in range(n_workers)))


def _check_worker(worker_id: int, n_workers: int) -> None:
    if n_workers < 1:
        raise ConfigError(f"n_workers must be positive, got {n_workers}")
    if not (0 <= worker_id < n_workers):
        raise ConfigError(f"worker_id {worker_id} out of range for {n_workers} workers")


@dataclass(frozen=True)
class NonIIDSpec:
    labels_per_worker: int
    assignment_seed: int = 0

    def __post_init__(self):
        if self.labels_per_worker < 1:
            raise ConfigError(f"labels_per_worker must be >= 1, got {self.labels_per_worker}")


def plan_noniid(dataset: Dataset, n_workers: int, spec: NonIIDSpec) -> list[np.ndarray]:
    """Label-skew partitioning: shuffle the label set, deal labels round-robin.

    Each label lands on exactly one worker and the worker keeps all samples
    of its labels, so the union over workers is the whole dataset.
    """
    _count_plan_call()
    if n_workers < 1:
        raise ConfigError(f"n_workers must be positive, got {n_workers}")
    if spec.labels_per_worker * n_workers < dataset.num_classes:
        raise ConfigError(
            f"labels_per_worker * n_workers = {spec.labels_per_worker * n_workers} "
            f"cannot cover {dataset.num_classes} classes"
        )
    rng = np.random.default_rng(spec.assignment_seed)
    label_order = rng.permutation(dataset.num_classes)
    parts: list[np.ndarray] = []
    for w in range(n_workers):
        mine = label_order[w::n_workers]
        idx = np.flatnonzero(np.isin(dataset.labels, mine))
        if idx.size == 0:
            raise ConfigError(
                f"worker {w} would receive no samples "
                f"({dataset.num_classes} classes across {n_workers} workers)"
            )
        parts.append(idx)
    return parts


# ---------------------------------------------------------------------------
# Cross-worker sample injection


@dataclass(frozen=True)
class InjectionConfig:
    alpha: float  # fraction of workers donating each iteration
    beta: float  # fraction of the donor batch donated
    base_batch: int

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.base_batch < 1:
            raise ConfigError(f"base_batch must be >= 1, got {self.base_batch}")


def adjusted_batch(cfg: InjectionConfig, n_workers: int) -> int:
    """Shrunken per-worker draw so batches stay near base size after donations.

    base / (1 + alpha * beta * N), rounded half-down, floored at 1.
    """
    if n_workers < 1:
        raise ConfigError(f"n_workers must be positive, got {n_workers}")
    raw = cfg.base_batch / (1.0 + cfg.alpha * cfg.beta * n_workers)
    return max(1, math.ceil(raw - 0.5))


def donors_for_step(seed: int, step: int, n_workers: int, alpha: float) -> np.ndarray:
    """The ceil(alpha*N) donor ids for one iteration, uniform without replacement."""
    k = math.ceil(alpha * n_workers)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    return np.sort(rng.choice(n_workers, size=k, replace=False)).astype(np.int64)


def donation_rows(batch: Batch, beta: float, seed: int, step: int, donor: int) -> np.ndarray:
    """Row indices (into the donor batch) donated this iteration, without replacement."""
    k = min(len(batch), math.ceil(beta * len(batch)))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, donor]))
    return np.sort(rng.choice(len(batch), size=k, replace=False)).astype(np.int64)


def injection_round(
    batches: list[Batch], cfg: InjectionConfig, n_workers: int, seed: int, step: int
) -> list[Batch]:
    """Pure form of one injection exchange: every donor's share is appended to
    every other worker's batch. Donations are copies; donors keep their rows.

    The runtime performs the same exchange over messages; this function is
    the reference it is checked against.
    """
    if len(batches) != n_workers:
        raise ConfigError(f"expected {n_workers} batches, got {len(batches)}")
    donors = donors_for_step(seed, step, n_workers, cfg.alpha)
    logger.debug("injection step %d donors %s", step, donors.tolist())
    shares = {
        int(d): donation_rows(batches[d], cfg.beta, seed, step, int(d)) for d in donors
    }
    out = []
    for w in range(n_workers):
        feats = [batches[w].features]
        labels = [batches[w].labels]
        for d in donors:
            d = int(d)
            if d == w:
                continue
            rows = shares[d]
            feats.append(batches[d].features[rows])
            labels.append(batches[d].labels[rows])
        out.append(
            Batch(
                np.concatenate(feats, axis=0),
                np.concatenate(labels, axis=0),
                batches[w].source_chunk,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Samplers


class ChunkSampler:
    """Infinite batch stream over a worker's chunk traversal.

    An epoch is one pass over the plan's chunk_order; the order inside each
    chunk is reshuffled every epoch with an epoch-indexed seed shared by all
    workers. Tail samples that do not fill a batch are dropped at the epoch
    boundary.
    """

    def __init__(
        self,
        dataset: Dataset,
        split: ChunkSplit,
        plan: PartitionPlan,
        batch_size: int,
        seed: int,
    ):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.split = split
        self.plan = plan
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = -1
        self.pos = 0
        self._traversal = np.empty(0, dtype=np.int64)
        self._chunk_edges: list[int] = []
        self.epoch_length = sum(
            split.bounds[c][1] - split.bounds[c][0] for c in plan.chunk_order
        )
        if self.epoch_length < batch_size:
            raise ConfigError("worker partition smaller than one batch")

    def _rebuild(self) -> None:
        self.epoch += 1
        parts = []
        edges = [0]
        for c in self.plan.chunk_order:
            idx = self.split.chunk_indices(c)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch, c]))
            parts.append(idx[rng.permutation(idx.size)])
            edges.append(edges[-1] + idx.size)
        self._traversal = np.concatenate(parts)
        self._chunk_edges = edges
        self.pos = 0

    def next_batch(self) -> Batch:
        if self.epoch < 0 or self.pos + self.batch_size > self._traversal.size:
            self._rebuild()
        idx = self._traversal[self.pos : self.pos + self.batch_size]
        # provenance: the chunk holding the first sample of the batch
        k = int(np.searchsorted(self._chunk_edges, self.pos, side="right")) - 1
        source = self.plan.chunk_order[k]
        self.pos += self.batch_size
        return Batch(self.dataset.features[idx], self.dataset.labels[idx], source)


class SubsetSampler:
    """Infinite batch stream over a fixed index subset (label-skew partitions)."""

    def __init__(
        self, dataset: Dataset, indices: np.ndarray, batch_size: int, seed: int, worker_id: int
    ):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        if indices.size < batch_size:
            raise ConfigError("worker partition smaller than one batch")
        self.dataset = dataset
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.seed = seed
        self.worker_id = worker_id
        self.epoch = -1
        self.pos = 0
        self._traversal = np.empty(0, dtype=np.int64)
        self.epoch_length = int(indices.size)

    def _rebuild(self) -> None:
        self.epoch += 1
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, self.epoch, 1_000_003 + self.worker_id])
        )
        self._traversal = self.indices[rng.permutation(self.indices.size)]
        self.pos = 0

    def next_batch(self) -> Batch:
        if self.epoch < 0 or self.pos + self.batch_size > self._traversal.size:
            self._rebuild()
        idx = self._traversal[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return Batch(self.dataset.features[idx], self.dataset.labels[idx], self.worker_id)
