"""Weighted averaging of learner models into the community model.

Contribution weights default to shard sizes; the averaged vector is a convex
combination computed in ascending learner order so repeated runs are
bitwise-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fedorch.models import ParameterVector


@dataclass(frozen=True)
class ContributionWeights:
    raw: tuple[float, ...]
    normalized: tuple[float, ...]


def normalize_weights(raw: Sequence[float]) -> ContributionWeights:
    """Normalize positive contribution values to sum to one."""
    raw = tuple(float(p) for p in raw)
    if not raw:
        raise ValueError("no contribution weights given")
    if any(not np.isfinite(p) or p <= 0 for p in raw):
        raise ValueError(f"contribution weights must be positive and finite: {raw}")
    total = sum(raw)
    return ContributionWeights(raw=raw, normalized=tuple(p / total for p in raw))


def weights_from_examples(learners: Iterable) -> ContributionWeights:
    """Contribution weights proportional to per-learner training-set sizes.

    Accepts anything with a num_examples attribute (profiles, shards) or
    plain integer counts.
    """
    sizes = tuple(int(getattr(x, "num_examples", x)) for x in learners)
    if any(n < 1 for n in sizes):
        raise ValueError(f"every learner needs at least one example: {sizes}")
    return normalize_weights(sizes)


def weighted_average(
    models: Sequence[tuple[ParameterVector, float]],
) -> ParameterVector:
    """Convex combination of parameter vectors under positive raw weights.

    Models are combined in the given (ascending learner index) order. The
    result is clamped to the coordinate-wise hull of the inputs, which keeps
    float rounding from escaping the convex envelope and makes averaging N
    identical models return them bit-for-bit.
    """
    if not models:
        raise ValueError("no models to average")
    weights = normalize_weights([w for _, w in models])
    first = models[0][0]
    for params, _ in models:
        if not params.same_layout(first):
            raise ValueError("parameter layouts differ across learners")
        params.require_finite("model update")

    acc = np.zeros_like(first.values)
    lower = first.values.copy()
    upper = first.values.copy()
    for (params, _), norm in zip(models, weights.normalized):
        acc += norm * params.values
        np.minimum(lower, params.values, out=lower)
        np.maximum(upper, params.values, out=upper)
    return ParameterVector(np.clip(acc, lower, upper), first.layout)
