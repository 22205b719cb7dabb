"""Learner-side execution: run an assigned number of SGD batches against the
local shard, time them, and report the updated model.

Batch order is deterministic: at every epoch boundary the shard is reshuffled
from a PCG64 stream seeded with hash_seed(global_seed, round, learner_index),
and batches are consecutive slices of the permutation. When the assigned
batch count exceeds one epoch, the stream simply yields the next permutation.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass
from statistics import median
from typing import Callable

import numpy as np

from fedorch.models import (
    Dataset,
    Hyperparams,
    ModelSpec,
    ParameterVector,
    _grad_mse_flat,
)

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer (Steele/Lea/Flood constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_seed(global_seed: int, round_num: int, learner_index: int) -> int:
    """Stable 64-bit seed for (run, round, learner) shuffle streams.

    Chains splitmix64 over the three inputs; distinct inputs collide only
    with negligible probability.
    """
    h = _splitmix64(global_seed & _MASK64)
    h = _splitmix64(h ^ (round_num & _MASK64))
    h = _splitmix64(h ^ (learner_index & _MASK64))
    return h


class MonotonicClock:
    """Wall-clock batch timing via time.perf_counter."""

    kind = "monotonic"

    def time_batch(self, learner_index: int, fn: Callable[[], None]) -> float:
        start = time.perf_counter()
        fn()
        return time.perf_counter() - start


class SimulatedClock:
    """Deterministic clock charging a fixed per-batch cost per learner.

    Costs may be a single float (uniform) or a mapping learner_index -> cost.
    The clock never consults wall time, so runs replay identically.
    """

    kind = "simulated"

    def __init__(self, costs: float | dict[int, float]):
        self._costs = costs
        for cost in [costs] if isinstance(costs, (int, float)) else costs.values():
            if not cost > 0:
                raise ValueError("simulated batch cost must be positive")

    def cost_for(self, learner_index: int) -> float:
        if isinstance(self._costs, (int, float)):
            return float(self._costs)
        try:
            return float(self._costs[learner_index])
        except KeyError:
            raise ValueError(f"no simulated batch cost for learner {learner_index}") from None

    def time_batch(self, learner_index: int, fn: Callable[[], None]) -> float:
        fn()
        return self.cost_for(learner_index)


Clock = MonotonicClock | SimulatedClock


@dataclass(frozen=True)
class TaskAssignment:
    """One round's marching orders: start params, batch budget, hyperparams."""

    round_num: int
    params: ParameterVector
    num_batches: int
    hyperparams: Hyperparams

    def __post_init__(self) -> None:
        if self.num_batches < 1:
            raise ValueError("num_batches must be positive")


@dataclass(frozen=True)
class LocalUpdate:
    learner_index: int
    round_num: int
    params: ParameterVector
    num_examples: int
    observed_batch_time: float
    batches_executed: int
    busy_seconds: float


def _batch_index_stream(n: int, batch_size: int, seed: int):
    """Yield index arrays: consecutive batches of fresh permutations."""
    rng = np.random.Generator(np.random.PCG64(seed))
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def _sgd_linear_single(
    input_dim: int,
    flat: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    num_batches: int,
    lr: float,
    seed: int,
    clock: "Clock",
    learner_index: int,
) -> list[float]:
    """Hot path for the most common setting (linear model, batch size 1).

    Same permutation stream and update rule as the generic loop, with the
    per-row gradient 2*(x.w + b - y) applied directly.
    """
    w = flat[:input_dim]
    rng = np.random.Generator(np.random.PCG64(seed))
    lr2 = 2.0 * lr
    n = features.shape[0]
    done = 0
    if isinstance(clock, SimulatedClock):
        cost = clock.cost_for(learner_index)
        while done < num_batches:
            for j in rng.permutation(n):
                if done == num_batches:
                    break
                x = features[j]
                residual = x @ w + flat[input_dim] - targets[j]
                if not math.isfinite(residual):
                    raise FloatingPointError(
                        f"non-finite loss at batch {done} (learner {learner_index})"
                    )
                step = lr2 * residual
                w -= step * x
                flat[input_dim] -= step
                done += 1
        return [cost] * num_batches

    times: list[float] = []
    while done < num_batches:
        for j in rng.permutation(n):
            if done == num_batches:
                break
            start = time.perf_counter()
            x = features[j]
            residual = x @ w + flat[input_dim] - targets[j]
            if not math.isfinite(residual):
                raise FloatingPointError(
                    f"non-finite loss at batch {done} (learner {learner_index})"
                )
            step = lr2 * residual
            w -= step * x
            flat[input_dim] -= step
            times.append(time.perf_counter() - start)
            done += 1
    return times


def run_batches(
    spec: ModelSpec,
    start_params: ParameterVector,
    shard: Dataset,
    num_batches: int,
    hyperparams: Hyperparams,
    shuffle_seed: int,
    clock: Clock,
    learner_index: int = 0,
) -> tuple[ParameterVector, list[float]]:
    """Run exactly num_batches SGD updates; returns final params and the
    per-batch seconds observed (or charged) by the clock."""
    if shard.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"shard has {shard.features.shape[1]} features, model expects {spec.input_dim}"
        )
    if start_params.size != spec.param_count():
        raise ValueError("parameter vector does not match the model spec")
    batch_size = hyperparams.batch_size
    if batch_size > shard.num_rows:
        warnings.warn(
            f"batch_size {batch_size} exceeds shard size {shard.num_rows}; clamping",
            stacklevel=2,
        )
        batch_size = shard.num_rows

    flat = start_params.values.copy()
    features = shard.features
    targets = shard.targets
    lr = hyperparams.learning_rate

    if spec.kind == "linear" and batch_size == 1:
        batch_times = _sgd_linear_single(
            spec.input_dim, flat, features, targets, num_batches, lr,
            shuffle_seed, clock, learner_index,
        )
    else:
        grad = np.empty_like(flat)
        stream = _batch_index_stream(shard.num_rows, batch_size, shuffle_seed)
        batch_times = []
        idx = np.empty(0, dtype=np.intp)
        batch_num = 0

        def one_batch() -> None:
            health = _grad_mse_flat(spec, flat, features[idx], targets[idx], grad)
            if not math.isfinite(health):
                raise FloatingPointError(
                    f"non-finite loss at batch {batch_num} (learner {learner_index})"
                )
            np.subtract(flat, lr * grad, out=flat)

        for batch_num in range(num_batches):
            idx = next(stream)
            batch_times.append(clock.time_batch(learner_index, one_batch))

    result = ParameterVector(flat, start_params.layout)
    result.require_finite(f"learner {learner_index} parameters after training")
    return result, batch_times


def execute_task(
    spec: ModelSpec,
    assignment: TaskAssignment,
    shard: Dataset,
    learner_index: int,
    clock: Clock,
) -> LocalUpdate:
    """Execute one round's assignment against the local shard."""
    params, batch_times = run_batches(
        spec,
        assignment.params,
        shard,
        assignment.num_batches,
        assignment.hyperparams,
        shuffle_seed=hash_seed(assignment.hyperparams.seed, assignment.round_num, learner_index),
        clock=clock,
        learner_index=learner_index,
    )
    return LocalUpdate(
        learner_index=learner_index,
        round_num=assignment.round_num,
        params=params,
        num_examples=shard.num_rows,
        observed_batch_time=median(batch_times),
        batches_executed=len(batch_times),
        busy_seconds=sum(batch_times),
    )


def train_centralized(
    spec: ModelSpec,
    start_params: ParameterVector,
    train: Dataset,
    epochs: int,
    hyperparams: Hyperparams,
    clock: Clock,
) -> list[tuple[ParameterVector, float]]:
    """Centralized baseline: epoch-by-epoch SGD over the undivided dataset.

    Each epoch e reuses the learner seeding rule hash_seed(seed, e, 0), so a
    one-learner federation running one epoch per round is step-for-step
    identical to this trainer.
    """
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    batch_size = min(hyperparams.batch_size, train.num_rows)
    batches_per_epoch = -(-train.num_rows // batch_size)
    history: list[tuple[ParameterVector, float]] = []
    params = start_params
    for epoch in range(1, epochs + 1):
        params, batch_times = run_batches(
            spec,
            params,
            train,
            batches_per_epoch,
            hyperparams,
            shuffle_seed=hash_seed(hyperparams.seed, epoch, 0),
            clock=clock,
            learner_index=0,
        )
        history.append((params, sum(batch_times)))
    return history
