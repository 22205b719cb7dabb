"""Desk-scale regression models: linear and MLP heads, vanilla SGD, MSE loss,
and the MSE/RMSE/MAE/Pearson evaluation suite.

All numerics are float64. Model parameters live in a flat vector with a
named-segment layout so they can be averaged, diffed and shipped over the
wire without knowing the architecture.

Randomness comes from numpy's PCG64 generator, seeded explicitly everywhere;
identical (spec, seed) inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Segment = tuple[str, tuple[int, ...]]


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 parameter vector plus a (name, shape) segment layout."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("parameter values must be a 1-D vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", _normalize_layout(self.layout))
        total = sum(_segment_size(shape) for _, shape in self.layout)
        if total != values.size:
            raise ValueError(
                f"layout covers {total} values but vector has {values.size}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def require_finite(self, context: str = "parameters") -> None:
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite values in {context}")

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def segments(self) -> dict[str, np.ndarray]:
        """Views into the flat vector, reshaped per segment."""
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            size = _segment_size(shape)
            out[name] = self.values[offset : offset + size].reshape(shape)
            offset += size
        return out


def _segment_size(shape: tuple[int, ...]) -> int:
    return int(math.prod(shape))


def _normalize_layout(layout) -> tuple[Segment, ...]:
    return tuple((str(name), tuple(int(s) for s in shape)) for name, shape in layout)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a regression model with a single output.

    kind "linear" ignores hidden_dims; kind "mlp" stacks affine layers with
    relu between hidden layers and an identity output head.
    """

    kind: str
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind == "linear" and self.hidden_dims:
            raise ValueError("linear model takes no hidden_dims")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, output head included."""
        dims = [self.input_dim, *self.hidden_dims, 1]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def layout(self) -> tuple[Segment, ...]:
        if self.kind == "linear":
            return (("weights", (self.input_dim,)), ("bias", (1,)))
        segs: list[Segment] = []
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            segs.append((f"layer{i}.weights", (fan_in, fan_out)))
            segs.append((f"layer{i}.bias", (fan_out,)))
        return tuple(segs)

    def param_count(self) -> int:
        return sum(_segment_size(shape) for _, shape in self.layout())


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) with an n-vector of regression targets."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if targets.ndim != 1:
            raise ValueError("targets must be a 1-D vector")
        if features.shape[0] != targets.shape[0]:
            raise ValueError(
                f"{features.shape[0]} feature rows vs {targets.shape[0]} targets"
            )
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not np.isfinite(features).all() or not np.isfinite(targets).all():
            raise ValueError("dataset contains NaN or Inf")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)

    @property
    def num_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.targets[indices])


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float
    batch_size: int
    seed: int

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class Metrics:
    """Evaluation record: squared/absolute errors plus Pearson correlation.

    corr is defined as 0.0 whenever predictions or targets have zero
    variance, so constant outputs never poison downstream CSVs with NaN.
    """

    mse: float
    rmse: float
    mae: float
    corr: float

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse, "rmse": self.rmse, "mae": self.mae, "corr": self.corr}


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    """Deterministically initialize parameters for the given architecture.

    Weight segments are drawn uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a
    PCG64 stream seeded with `seed`, in layout order; bias segments are zero.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    values = np.empty(spec.param_count(), dtype=np.float64)
    offset = 0
    for (name, shape), (fan_in, _) in zip(spec.layout(), _fan_ins(spec)):
        size = _segment_size(shape)
        if name.endswith("bias"):
            values[offset : offset + size] = 0.0
        else:
            bound = 1.0 / math.sqrt(fan_in)
            values[offset : offset + size] = rng.uniform(-bound, bound, size)
        offset += size
    return ParameterVector(values, spec.layout())


def _fan_ins(spec: ModelSpec) -> list[tuple[int, int]]:
    # One (fan_in, fan_out) entry per layout segment (weights and bias alike).
    if spec.kind == "linear":
        return [(spec.input_dim, 1), (spec.input_dim, 1)]
    out = []
    for dims in spec.layer_dims():
        out.append(dims)
        out.append(dims)
    return out


def _check_compat(spec: ModelSpec, params: ParameterVector, features: np.ndarray) -> None:
    if params.size != spec.param_count():
        raise ValueError(
            f"parameter vector has {params.size} values, spec expects {spec.param_count()}"
        )
    if features.shape[1] != spec.input_dim:
        raise ValueError(
            f"feature width {features.shape[1]} does not match input_dim {spec.input_dim}"
        )


def forward(spec: ModelSpec, params: ParameterVector, features: np.ndarray) -> np.ndarray:
    """Predictions for a feature matrix; returns a 1-D float64 vector."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    _check_compat(spec, params, features)
    return _forward_flat(spec, params.values, features)


def _forward_flat(spec: ModelSpec, flat: np.ndarray, features: np.ndarray) -> np.ndarray:
    if spec.kind == "linear":
        d = spec.input_dim
        return features @ flat[:d] + flat[d]
    act = features
    offset = 0
    layers = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out]
        offset += fan_out
        act = act @ w + b
        if i < len(layers) - 1:
            act = np.maximum(act, 0.0)
    return act[:, 0]


def grad_mse(spec: ModelSpec, params: ParameterVector, batch: Dataset) -> ParameterVector:
    """Analytic gradient of mean((pred - target)^2) over the batch."""
    _check_compat(spec, params, batch.features)
    grad = np.empty_like(params.values)
    _grad_mse_flat(spec, params.values, batch.features, batch.targets, grad)
    return ParameterVector(grad, params.layout)


def _grad_mse_flat(
    spec: ModelSpec,
    flat: np.ndarray,
    features: np.ndarray,
    targets: np.ndarray,
    out: np.ndarray,
) -> float:
    """Write the MSE gradient into `out`; returns the residual sum, which is
    non-finite as soon as the loss diverges (cheap per-batch health signal)."""
    m = features.shape[0]
    if spec.kind == "linear":
        d = spec.input_dim
        residual = features @ flat[:d] + flat[d] - targets
        scale = 2.0 / m
        np.matmul(scale * residual, features, out=out[:d])
        out[d] = scale * residual.sum()
        return float(residual.sum())

    # Forward pass, keeping pre- and post-activation values per layer.
    layers = spec.layer_dims()
    weights: list[np.ndarray] = []
    biases_off: list[int] = []
    acts: list[np.ndarray] = [features]
    pre: list[np.ndarray] = []
    offset = 0
    for i, (fan_in, fan_out) in enumerate(layers):
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        weights.append(w)
        offset += fan_in * fan_out
        biases_off.append(offset)
        b = flat[offset : offset + fan_out]
        offset += fan_out
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else z)

    residual = acts[-1][:, 0] - targets
    delta = (2.0 / m) * residual[:, None]
    for i in range(len(layers) - 1, -1, -1):
        fan_in, fan_out = layers[i]
        out[biases_off[i] : biases_off[i] + fan_out] = delta.sum(axis=0)
        w_off = biases_off[i] - fan_in * fan_out
        np.matmul(acts[i].T, delta, out=out[w_off : w_off + fan_in * fan_out].reshape(fan_in, fan_out))
        if i > 0:
            delta = (delta @ weights[i].T) * (pre[i - 1] > 0.0)
    return float(residual.sum())


def mse_loss(spec: ModelSpec, params: ParameterVector, data: Dataset) -> float:
    residual = forward(spec, params, data.features) - data.targets
    return float(np.mean(residual * residual))


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    """One vanilla SGD step: params - lr * grad. No momentum, no decay."""
    if not params.same_layout(grad):
        raise ValueError("gradient layout does not match parameter layout")
    return ParameterVector(params.values - lr * grad.values, params.layout)


def evaluate(spec: ModelSpec, params: ParameterVector, test: Dataset) -> Metrics:
    """MSE / RMSE / MAE / Pearson correlation of predictions on a test set."""
    if test.num_rows < 1:
        raise ValueError("test set is empty")
    predictions = forward(spec, params, test.features)
    return metrics_from_predictions(predictions, test.targets)


def metrics_from_predictions(predictions: np.ndarray, targets: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1 or predictions.size < 1:
        raise ValueError("predictions and targets must be equal-length nonempty vectors")
    residual = predictions - targets
    mse = float(np.mean(residual * residual))
    rmse = math.sqrt(mse)
    mae = float(np.mean(np.abs(residual)))
    return Metrics(mse=mse, rmse=rmse, mae=mae, corr=pearson(predictions, targets))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0.0 when either side has zero variance."""
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        return 0.0
    return float((xc @ yc) / math.sqrt(vx * vy))
