"""Synthetic regression tasks, CSV ingestion, and the three shard
partitioning schemes: uniform IID, uniform non-IID (narrow target buckets per
learner), and skewed non-IID (unequal shard sizes, bucketed targets).

Partitions are exact row-multiset splits of the input: shards are disjoint
and their union reproduces the dataset.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedorch.models import Dataset

log = logging.getLogger(__name__)

PARTITION_SCHEMES = ("uniform_iid", "uniform_noniid", "skewed_noniid")

# Shipped skew preset: 8 learners, largest fraction 0.287; on an 8356-row
# training set the largest shard lands at ~2400 rows.
SKEWED_PRESET_FRACTIONS = (0.287, 0.18, 0.13, 0.105, 0.09, 0.08, 0.07, 0.058)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Linear ground-truth regression task with targets rescaled to a range.

    Features are standard normal; noiseless targets are X @ w_true affinely
    mapped into [target_low, target_high]; Gaussian noise is added last.
    """

    input_dim: int
    true_weight_seed: int = 42
    noise_sigma: float = 0.0
    target_low: float = 45.0
    target_high: float = 81.0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not self.target_low < self.target_high:
            raise ValueError("target_low must be below target_high")


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str
    num_learners: int
    seed: int = 0
    buckets_per_learner: int = 1
    size_fractions: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.scheme not in PARTITION_SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_learners < 1:
            raise ValueError("num_learners must be positive")
        if self.buckets_per_learner < 1:
            raise ValueError("buckets_per_learner must be positive")
        object.__setattr__(self, "size_fractions", tuple(float(f) for f in self.size_fractions))
        if self.scheme == "skewed_noniid":
            f = self.size_fractions
            if len(f) != self.num_learners:
                raise ValueError(
                    f"size_fractions has {len(f)} entries for {self.num_learners} learners"
                )
            if any(x <= 0 for x in f):
                raise ValueError("size_fractions must be positive")
            if abs(sum(f) - 1.0) > 1e-9:
                raise ValueError(f"size_fractions sum to {sum(f)}, expected 1")
        elif self.size_fractions:
            raise ValueError("size_fractions only apply to the skewed_noniid scheme")

    @property
    def num_buckets(self) -> int:
        return self.num_learners * self.buckets_per_learner


@dataclass(frozen=True)
class Shard:
    learner_index: int
    data: Dataset

    @property
    def num_examples(self) -> int:
        return self.data.num_rows


def generate_synthetic(spec: SyntheticTaskSpec, n: int, seed: int) -> Dataset:
    """Deterministic synthetic dataset: PCG64(seed) drives features and noise,
    PCG64(true_weight_seed) drives the ground-truth weights."""
    if n < 1:
        raise ValueError("n must be positive")
    w_true = np.random.Generator(np.random.PCG64(spec.true_weight_seed)).standard_normal(
        spec.input_dim
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    features = rng.standard_normal((n, spec.input_dim))
    raw = features @ w_true
    lo, hi = float(raw.min()), float(raw.max())
    span = spec.target_high - spec.target_low
    if hi > lo:
        base = spec.target_low + (raw - lo) * (span / (hi - lo))
    else:
        base = np.full(n, spec.target_low + span / 2.0)
    # Clip guards the float endpoints so sigma=0 targets stay inside the range.
    base = np.clip(base, spec.target_low, spec.target_high)
    targets = base + spec.noise_sigma * rng.standard_normal(n)
    return Dataset(features, targets)


def train_test_split(data: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    """First n_train rows train, the rest test (rows are already IID)."""
    if not 0 < n_train < data.num_rows:
        raise ValueError("n_train must leave at least one test row")
    idx = np.arange(data.num_rows)
    return data.take(idx[:n_train]), data.take(idx[n_train:])


def bucket_by_target(data: Dataset, num_buckets: int) -> list[np.ndarray]:
    """Row indices cut into contiguous quantile groups of the target.

    Rows are stable-sorted by target (ties keep original order); group sizes
    differ by at most one, larger groups first.
    """
    n = data.num_rows
    if num_buckets < 1:
        raise ValueError("num_buckets must be positive")
    if num_buckets > n:
        raise ValueError(f"num_buckets {num_buckets} exceeds {n} rows")
    order = np.argsort(data.targets, kind="stable")
    return _contiguous_groups(order, num_buckets)


def _contiguous_groups(order: np.ndarray, k: int) -> list[np.ndarray]:
    n = order.size
    base, extra = divmod(n, k)
    groups = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        groups.append(order[start : start + size])
        start += size
    return groups


def partition(data: Dataset, plan: PartitionPlan) -> list[Shard]:
    """Split a dataset into per-learner shards according to the plan."""
    n = data.num_rows
    if plan.num_learners > n:
        raise ValueError(f"{plan.num_learners} learners for only {n} rows")
    if plan.scheme == "uniform_iid":
        index_groups = _split_uniform_iid(data, plan)
    elif plan.scheme == "uniform_noniid":
        index_groups = _split_uniform_noniid(data, plan)
    else:
        index_groups = _split_skewed_noniid(data, plan)
    return [Shard(k, data.take(idx)) for k, idx in enumerate(index_groups)]


def _split_uniform_iid(data: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    # Seeded shuffle, then round-robin deal: sizes differ by at most one.
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    order = rng.permutation(data.num_rows)
    return [order[k :: plan.num_learners] for k in range(plan.num_learners)]


def _split_uniform_noniid(data: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    # Contiguous runs of the target-sorted order, one run per learner, cut at
    # equal-size quotas. Each learner sees a narrow target band and the
    # uniform size invariant (diff <= 1) holds for any bucket count.
    order = np.argsort(data.targets, kind="stable")
    return _contiguous_groups(order, plan.num_learners)


def _skew_quotas(n: int, fractions: tuple[float, ...]) -> list[int]:
    quotas = [round(f * n) for f in fractions]
    residual = n - sum(quotas)
    largest = max(range(len(fractions)), key=lambda i: fractions[i])
    quotas[largest] += residual
    if min(quotas) < 1:
        raise ValueError("skew quotas leave a learner without data")
    return quotas


def _split_skewed_noniid(data: Dataset, plan: PartitionPlan) -> list[np.ndarray]:
    # Fill shards in target order up to each learner's quota: shard sizes
    # follow the fractions exactly and target ranges stay narrow/disjoint.
    order = np.argsort(data.targets, kind="stable")
    quotas = _skew_quotas(data.num_rows, plan.size_fractions)
    groups = []
    start = 0
    for q in quotas:
        groups.append(order[start : start + q])
        start += q
    return groups


def load_csv(path: str | Path) -> Dataset:
    """Read a dataset from CSV: header row, final column is the target."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        width = len(header)
        if width < 2:
            raise ValueError(f"{path}: need at least one feature column and a target")
        features: list[list[float]] = []
        targets: list[float] = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ValueError(
                    f"{path}: row {row_num} has {len(row)} cells, expected {width}"
                )
            parsed = []
            for col, cell in enumerate(row):
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: row {row_num}, column {header[col]!r}: "
                        f"cannot parse {cell!r}"
                    ) from None
                if not np.isfinite(value):
                    raise ValueError(
                        f"{path}: row {row_num}, column {header[col]!r}: "
                        f"non-finite value {cell!r}"
                    )
                parsed.append(value)
            features.append(parsed[:-1])
            targets.append(parsed[-1])
    if not targets:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.asarray(features), np.asarray(targets))


def save_csv(data: Dataset, path: str | Path) -> None:
    """Write a dataset as CSV with x0..x{d-1},target columns."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.num_features)] + ["target"])
        for row, target in zip(data.features, data.targets):
            writer.writerow([str(float(v)) for v in row] + [str(float(target))])


def export_shards(shards: list[Shard], out_dir: str | Path) -> Path:
    """Write one CSV per learner plus a manifest of counts and target ranges."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    with manifest_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["learner_index", "rows", "target_min", "target_max"])
        for shard in shards:
            save_csv(shard.data, out_dir / f"shard_{shard.learner_index}.csv")
            writer.writerow(
                [
                    shard.learner_index,
                    shard.num_examples,
                    str(float(shard.data.targets.min())),
                    str(float(shard.data.targets.max())),
                ]
            )
    log.info("exported %d shards to %s", len(shards), out_dir)
    return manifest_path
