"""Per-round local-work allocation for the two training policies.

Synchronous: every learner runs a fixed number of local epochs, so batch
counts scale with shard size and fast/small learners idle at the barrier.

Semi-synchronous: every learner trains for the same time budget
t_max = lambda * (slowest learner's epoch time) and performs
B_k = floor(t_max / t_beta_k) batches, so nobody idles for more than one
batch regardless of how data is spread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class LearnerProfile:
    """Timing and data facts the scheduler needs about one learner."""

    learner_index: int
    num_examples: int
    batch_size: int
    batch_seconds: float

    def __post_init__(self) -> None:
        if self.learner_index < 0:
            raise ValueError("learner_index must be nonnegative")
        if self.num_examples < 1:
            raise ValueError("num_examples must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.batch_seconds > 0:
            raise ValueError("batch_seconds must be positive")

    @property
    def batches_per_epoch(self) -> int:
        # Ceiling division: a partial final batch still counts as an update.
        return -(-self.num_examples // self.batch_size)


@dataclass(frozen=True)
class SyncPolicy:
    """Fixed number of local epochs per round."""

    local_epochs: int = 4

    def __post_init__(self) -> None:
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be positive")

    def tag(self) -> str:
        return f"SyncFedAvg(E={self.local_epochs})"


@dataclass(frozen=True)
class SemiSyncPolicy:
    """Equal time budget per round, lambda slowest-epochs long."""

    lam: float = 4.0

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def tag(self) -> str:
        return f"SemiSync(lambda={self.lam})"


Policy = SyncPolicy | SemiSyncPolicy


@dataclass(frozen=True)
class SchedulePlan:
    """Batch counts per learner for one round; t_max set for semi-sync only."""

    allocations: dict[int, int]
    t_max: float | None = None

    def batches_for(self, learner_index: int) -> int:
        return self.allocations[learner_index]


def epoch_time(profile: LearnerProfile) -> float:
    """Seconds one local epoch takes: ceil(|D|/beta) * t_beta."""
    return profile.batches_per_epoch * profile.batch_seconds


def compute_tmax(profiles: Sequence[LearnerProfile], lam: float) -> float:
    """Synchronization period: lambda times the slowest learner's epoch."""
    if not profiles:
        raise ValueError("no learner profiles")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return lam * max(epoch_time(p) for p in profiles)


def semisync_allocations(profiles: Sequence[LearnerProfile], lam: float) -> SchedulePlan:
    """B_k = floor(t_max / t_beta_k), at least one batch per learner."""
    t_max = compute_tmax(profiles, lam)
    allocations = {
        p.learner_index: max(1, math.floor(t_max / p.batch_seconds)) for p in profiles
    }
    return SchedulePlan(allocations=allocations, t_max=t_max)


def sync_allocations(profiles: Sequence[LearnerProfile], policy: SyncPolicy) -> SchedulePlan:
    """B_k = E * ceil(|D_k|/beta_k); no shared time budget."""
    if not profiles:
        raise ValueError("no learner profiles")
    allocations = {
        p.learner_index: policy.local_epochs * p.batches_per_epoch for p in profiles
    }
    return SchedulePlan(allocations=allocations, t_max=None)


def plan_for(profiles: Sequence[LearnerProfile], policy: Policy) -> SchedulePlan:
    if isinstance(policy, SemiSyncPolicy):
        return semisync_allocations(profiles, policy.lam)
    return sync_allocations(profiles, policy)


def busy_times(profiles: Sequence[LearnerProfile], plan: SchedulePlan) -> dict[int, float]:
    return {
        p.learner_index: plan.batches_for(p.learner_index) * p.batch_seconds
        for p in profiles
    }


def idle_time(profiles: Sequence[LearnerProfile], plan: SchedulePlan) -> dict[int, float]:
    """Seconds each learner waits at the barrier after finishing its work."""
    busy = busy_times(profiles, plan)
    longest = max(busy.values())
    return {k: longest - b for k, b in busy.items()}
