"""Synthetic datasets and heterogeneous client partitions.

Implements class-skewed Dirichlet splits and pathological (few classes per
client) splits, each in a sampling-with-replacement variant that also
unbalances the global class totals, plus Gaussian-cluster classification
data and quadratic client federations with a known optimum. Everything is a
pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import QuadraticFed

__all__ = [
    "LabeledDataset",
    "PartitionPlan",
    "PartitionStats",
    "dirichlet_partition",
    "pathological_partition",
    "synth_classification",
    "synth_quadratic_federation",
    "quadratic_optimum",
    "partition_stats",
    "save_dataset",
    "load_dataset",
    "save_plan",
    "load_plan",
]

_DATASET_MAGIC = b"FSIM"
_DATASET_VERSION = 1
_MAX_REDRAWS = 100


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix (D, input_dim) with integer class labels (D,)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise ValueError("features must be (D, dim) with matching labels")
        if f.shape[0] < self.num_classes:
            raise ValueError("need at least one sample per class slot")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError("labels out of range")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PartitionPlan:
    """Client -> sample-index assignment (duplicates allowed with replacement)."""

    assignments: tuple
    m: int
    with_replacement: bool

    def __post_init__(self):
        if self.m < 1 or len(self.assignments) != self.m:
            raise ValueError("need one assignment list per client, m >= 1")
        object.__setattr__(
            self,
            "assignments",
            tuple(np.asarray(a, dtype=np.int64) for a in self.assignments),
        )

    def client_indices(self, client_id: int) -> np.ndarray:
        return self.assignments[client_id]

    def validate_against(self, num_samples: int):
        """Check the structural invariants against a dataset of given size."""
        for a in self.assignments:
            if a.size and (a.min() < 0 or a.max() >= num_samples):
                raise ValueError("plan references out-of-range sample indices")
        if not self.with_replacement:
            merged = np.concatenate([a for a in self.assignments]) if self.m else np.array([])
            if not np.array_equal(np.sort(merged), np.arange(num_samples)):
                raise ValueError("without-replacement plan is not an exact partition")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _dirichlet(rng, alpha: float, size: int) -> np.ndarray:
    # Normalized Gamma(alpha, 1) draws; one shared construction for all splits.
    g = rng.gamma(alpha, 1.0, size=size)
    total = g.sum()
    while total <= 0.0:  # astronomically unlikely underflow for tiny alpha
        g = rng.gamma(alpha, 1.0, size=size)
        total = g.sum()
    return g / total


def _class_index_lists(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("labels out of range")
    per_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, idx in enumerate(per_class):
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
    return labels, per_class


def dirichlet_partition(labels, num_classes, m, u, with_replacement, seed) -> PartitionPlan:
    """Split samples across ``m`` clients with Dirichlet(u) class skew.

    With replacement each client draws a class-proportion vector and then
    floor(D/m) samples (class first, then a uniform member of that class),
    which also perturbs the global per-class totals. Without replacement each
    class's indices are dealt out in Dirichlet(u) proportions so that every
    sample is assigned exactly once.
    """
    if u <= 0:
        raise ValueError("concentration u must be > 0")
    if m < 1:
        raise ValueError("need m >= 1 clients")
    labels, per_class = _class_index_lists(labels, num_classes)
    rng = _rng(seed)
    D = labels.size

    if with_replacement:
        quota = D // m
        assignments = []
        for _ in range(m):
            props = _dirichlet(rng, u, num_classes)
            drawn_classes = rng.choice(num_classes, size=quota, p=props)
            counts = np.bincount(drawn_classes, minlength=num_classes)
            picks = [
                per_class[c][rng.integers(0, per_class[c].size, size=int(k))]
                for c, k in enumerate(counts)
                if k > 0
            ]
            assignments.append(np.concatenate(picks) if picks else np.array([], dtype=np.int64))
        return PartitionPlan(tuple(assignments), m, True)

    for _ in range(_MAX_REDRAWS):
        buckets = [[] for _ in range(m)]
        for idx in per_class:
            shuffled = rng.permutation(idx)
            props = _dirichlet(rng, u, m)
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for client, part in enumerate(np.split(shuffled, cuts)):
                buckets[client].append(part)
        assignments = [
            np.concatenate(b) if b else np.array([], dtype=np.int64) for b in buckets
        ]
        if all(a.size > 0 for a in assignments):
            plan = PartitionPlan(tuple(assignments), m, False)
            plan.validate_against(D)
            return plan
    raise ValueError(
        f"could not draw a partition with every client nonempty in {_MAX_REDRAWS} tries"
    )


def pathological_partition(labels, num_classes, m, c, with_replacement, seed) -> PartitionPlan:
    """Restrict each client to ``c`` random classes.

    With replacement a client draws floor(D/m) samples uniformly over its
    active classes. Without replacement each class's shuffled indices are
    dealt in near-equal shards to the clients holding that class; active-set
    draws are retried until every class is covered so the result stays an
    exact partition.
    """
    if not 1 <= c <= num_classes:
        raise ValueError("active classes per client out of range")
    labels, per_class = _class_index_lists(labels, num_classes)
    rng = _rng(seed)
    D = labels.size

    active_sets = None
    for _ in range(_MAX_REDRAWS):
        candidate = [np.sort(rng.choice(num_classes, size=c, replace=False)) for _ in range(m)]
        covered = np.zeros(num_classes, dtype=bool)
        for s in candidate:
            covered[s] = True
        if with_replacement or covered.all():
            active_sets = candidate
            break
    if active_sets is None:
        raise ValueError(
            f"could not cover every class with m={m}, c={c} in {_MAX_REDRAWS} tries"
        )

    if with_replacement:
        quota = D // m
        assignments = []
        for s in active_sets:
            drawn_classes = s[rng.integers(0, c, size=quota)]
            counts = np.bincount(drawn_classes, minlength=num_classes)
            picks = [
                per_class[cls][rng.integers(0, per_class[cls].size, size=int(k))]
                for cls, k in enumerate(counts)
                if k > 0
            ]
            assignments.append(np.concatenate(picks) if picks else np.array([], dtype=np.int64))
        return PartitionPlan(tuple(assignments), m, True)

    buckets = [[] for _ in range(m)]
    for cls in range(num_classes):
        holders = [i for i in range(m) if cls in active_sets[i]]
        shuffled = rng.permutation(per_class[cls])
        for j, part in enumerate(np.array_split(shuffled, len(holders))):
            buckets[holders[j]].append(part)
    assignments = [np.concatenate(b) if b else np.array([], dtype=np.int64) for b in buckets]
    plan = PartitionPlan(tuple(assignments), m, False)
    plan.validate_against(D)
    return plan


def synth_classification(num_classes, input_dim, D, class_separation, noise, seed) -> LabeledDataset:
    """Gaussian class clusters around random unit directions.

    Means sit at class_separation times a random unit vector per class;
    samples add isotropic noise. Labels are balanced (up to remainder) and
    shuffled. Deterministic per seed.
    """
    if num_classes < 1 or input_dim < 1 or D < 1:
        raise ValueError("sizes must be >= 1")
    if D < num_classes:
        raise ValueError("need at least one sample per class")
    rng = _rng(seed)
    directions = rng.standard_normal((num_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = np.arange(D, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    features = means[labels] + noise * rng.standard_normal((D, input_dim))
    return LabeledDataset(features, labels, num_classes)


def synth_quadratic_federation(m, d, center_spread, seed):
    """Quadratic clients 0.5 * ||w - c_i||^2 with Gaussian centers.

    The analytic global optimum is the mean of the centers, which makes the
    federation a ground-truth benchmark for convergence checks.
    """
    if m < 1 or d < 1:
        raise ValueError("need m >= 1 and d >= 1")
    rng = _rng(seed)
    centers = center_spread * rng.standard_normal((m, d))
    return [QuadraticFed(centers[i]) for i in range(m)]


def quadratic_optimum(models) -> np.ndarray:
    """Mean of the client centers: the minimizer of the averaged objective."""
    return np.mean(np.stack([mdl.center for mdl in models]), axis=0)


@dataclass(frozen=True)
class PartitionStats:
    """Exact count summary of a plan: global per-class totals and per-client table."""

    class_counts: np.ndarray
    client_class_counts: np.ndarray
    class_std: float


def partition_stats(plan: PartitionPlan, labels, num_classes) -> PartitionStats:
    """Per-class global counts (with multiplicity), per-client table, and std."""
    labels = np.asarray(labels, dtype=np.int64)
    table = np.zeros((plan.m, num_classes), dtype=np.int64)
    for i, idx in enumerate(plan.assignments):
        if idx.size and (idx.min() < 0 or idx.max() >= labels.size):
            raise ValueError("plan references out-of-range sample indices")
        if idx.size:
            table[i] = np.bincount(labels[idx], minlength=num_classes)
    class_counts = table.sum(axis=0)
    return PartitionStats(class_counts, table, float(np.std(class_counts)))


def save_dataset(path, dataset: LabeledDataset):
    """Write the flat binary dataset format (header + f64 rows + u32 labels)."""
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<IQII",
                _DATASET_VERSION,
                dataset.size,
                dataset.input_dim,
                dataset.num_classes,
            )
        )
        fh.write(dataset.features.astype("<f8").tobytes(order="C"))
        fh.write(dataset.labels.astype("<u4").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DATASET_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, D, input_dim, num_classes = struct.unpack("<IQII", fh.read(20))
        if version != _DATASET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        feats = np.frombuffer(fh.read(8 * D * input_dim), dtype="<f8").reshape(D, input_dim)
        labels = np.frombuffer(fh.read(4 * D), dtype="<u4").astype(np.int64)
    return LabeledDataset(feats.copy(), labels, num_classes)


def save_plan(path, plan: PartitionPlan):
    payload = {
        "m": plan.m,
        "with_replacement": plan.with_replacement,
        "assignments": {str(i): a.tolist() for i, a in enumerate(plan.assignments)},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_plan(path) -> PartitionPlan:
    with open(path) as fh:
        payload = json.load(fh)
    m = int(payload["m"])
    assignments = tuple(
        np.asarray(payload["assignments"][str(i)], dtype=np.int64) for i in range(m)
    )
    return PartitionPlan(assignments, m, bool(payload["with_replacement"]))
