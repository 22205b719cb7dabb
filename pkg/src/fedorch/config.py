"""Experiment configuration: a single TOML file with nested tables.

Every field has a default, so an empty config runs the shipped skewed
non-IID preset: 8 learners, SGD lr 5e-5, batch size 1, seed 1990, 25 rounds,
SemiSync(lambda=4) against a simulated 0.12 s/batch clock. A resolved echo of
the configuration is written next to every run's outputs so results can be
reproduced byte-for-byte under the simulated clock.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomlkit

from fedorch.data import (
    SKEWED_PRESET_FRACTIONS,
    PartitionPlan,
    SyntheticTaskSpec,
    generate_synthetic,
    load_csv,
    partition,
    train_test_split,
)
from fedorch.learner import MonotonicClock, SimulatedClock
from fedorch.models import Dataset, Hyperparams, ModelSpec
from fedorch.policy import SemiSyncPolicy, SyncPolicy


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class TaskConfig:
    kind: str = "synthetic"          # synthetic | csv
    input_dim: int = 16
    n_train: int = 8356
    n_test: int = 2090
    noise_sigma: float = 0.5
    target_low: float = 45.0
    target_high: float = 81.0
    true_weight_seed: int = 42
    train_path: str = ""
    test_path: str = ""


@dataclass
class ModelConfig:
    kind: str = "linear"             # linear | mlp
    hidden_dims: list[int] = field(default_factory=list)


@dataclass
class PartitionConfig:
    scheme: str = "skewed_noniid"    # uniform_iid | uniform_noniid | skewed_noniid
    num_learners: int = 8
    buckets_per_learner: int = 1
    size_fractions: list[float] = field(default_factory=list)  # empty: preset


@dataclass
class PolicyConfig:
    kind: str = "semisync"           # sync | semisync
    local_epochs: int = 4
    lam: float = 4.0


@dataclass
class TrainConfig:
    rounds: int = 25
    learning_rate: float = 5e-5
    batch_size: int = 1
    seed: int = 1990
    target_mae: float = 0.0          # 0 disables early stopping
    timing_ema: bool = False


@dataclass
class ClockConfig:
    kind: str = "simulated"          # simulated | monotonic
    batch_seconds: float = 0.12
    per_learner_batch_seconds: list[float] = field(default_factory=list)


@dataclass
class RunConfig:
    mode: str = "inprocess"          # inprocess | distributed
    output_dir: str = "out"


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    clock: ClockConfig = field(default_factory=ClockConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # ------------------------------------------------------------ validation

    def validate(self) -> None:
        if self.task.kind not in ("synthetic", "csv"):
            raise ConfigError(f"task.kind: unknown value {self.task.kind!r}")
        if self.task.kind == "csv":
            for attr in ("train_path", "test_path"):
                path = getattr(self.task, attr)
                if not path:
                    raise ConfigError(f"task.{attr}: required for task.kind = 'csv'")
                if not Path(path).exists():
                    raise ConfigError(f"task.{attr}: no such file {path!r}")
        else:
            if self.task.input_dim < 1:
                raise ConfigError("task.input_dim: must be positive")
            if self.task.n_train < 1 or self.task.n_test < 1:
                raise ConfigError("task.n_train/n_test: must be positive")
            if self.task.noise_sigma < 0:
                raise ConfigError("task.noise_sigma: must be nonnegative")
            if not self.task.target_low < self.task.target_high:
                raise ConfigError("task.target_low: must be below task.target_high")
        if self.model.kind not in ("linear", "mlp"):
            raise ConfigError(f"model.kind: unknown value {self.model.kind!r}")
        if self.partition.scheme not in ("uniform_iid", "uniform_noniid", "skewed_noniid"):
            raise ConfigError(f"partition.scheme: unknown value {self.partition.scheme!r}")
        if self.partition.num_learners < 1:
            raise ConfigError("partition.num_learners: must be positive")
        if self.policy.kind not in ("sync", "semisync"):
            raise ConfigError(f"policy.kind: unknown value {self.policy.kind!r}")
        if self.policy.kind == "sync" and self.policy.local_epochs < 1:
            raise ConfigError("policy.local_epochs: must be positive")
        if self.policy.kind == "semisync" and not self.policy.lam > 0:
            raise ConfigError("policy.lam: must be positive")
        if self.train.rounds < 0:
            raise ConfigError("train.rounds: must be nonnegative")
        if self.train.learning_rate < 0:
            raise ConfigError("train.learning_rate: must be nonnegative")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size: must be positive")
        if self.train.seed < 0:
            raise ConfigError("train.seed: must be unsigned")
        if self.clock.kind not in ("simulated", "monotonic"):
            raise ConfigError(f"clock.kind: unknown value {self.clock.kind!r}")
        if self.clock.kind == "simulated":
            costs = self.clock.per_learner_batch_seconds
            if costs and len(costs) != self.partition.num_learners:
                raise ConfigError(
                    "clock.per_learner_batch_seconds: need one entry per learner"
                )
            if any(not c > 0 for c in costs) or (not costs and not self.clock.batch_seconds > 0):
                raise ConfigError("clock.batch_seconds: must be positive")
        if self.run.mode not in ("inprocess", "distributed"):
            raise ConfigError(f"run.mode: unknown value {self.run.mode!r}")
        try:
            self.partition_plan()
            self.model_spec()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------- factories

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            kind=self.model.kind,
            input_dim=self._input_dim(),
            hidden_dims=tuple(self.model.hidden_dims),
        )

    def _input_dim(self) -> int:
        if self.task.kind == "csv":
            return load_csv(self.task.train_path).num_features
        return self.task.input_dim

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            input_dim=self.task.input_dim,
            true_weight_seed=self.task.true_weight_seed,
            noise_sigma=self.task.noise_sigma,
            target_low=self.task.target_low,
            target_high=self.task.target_high,
        )

    def datasets(self) -> tuple[Dataset, Dataset]:
        """(train, test) for the configured task."""
        if self.task.kind == "csv":
            return load_csv(self.task.train_path), load_csv(self.task.test_path)
        full = generate_synthetic(
            self.task_spec(), self.task.n_train + self.task.n_test, seed=self.train.seed
        )
        return train_test_split(full, self.task.n_train)

    def partition_plan(self) -> PartitionPlan:
        fractions = tuple(self.partition.size_fractions)
        if self.partition.scheme == "skewed_noniid" and not fractions:
            if self.partition.num_learners != len(SKEWED_PRESET_FRACTIONS):
                raise ConfigError(
                    "partition.size_fractions: required when num_learners != "
                    f"{len(SKEWED_PRESET_FRACTIONS)} (preset is 8-learner)"
                )
            fractions = SKEWED_PRESET_FRACTIONS
        return PartitionPlan(
            scheme=self.partition.scheme,
            num_learners=self.partition.num_learners,
            seed=self.train.seed,
            buckets_per_learner=self.partition.buckets_per_learner,
            size_fractions=fractions,
        )

    def shards(self, train: Dataset):
        return partition(train, self.partition_plan())

    def policy_obj(self):
        if self.policy.kind == "sync":
            return SyncPolicy(local_epochs=self.policy.local_epochs)
        return SemiSyncPolicy(lam=self.policy.lam)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            learning_rate=self.train.learning_rate,
            batch_size=self.train.batch_size,
            seed=self.train.seed,
        )

    def clock_obj(self):
        if self.clock.kind == "monotonic":
            return MonotonicClock()
        if self.clock.per_learner_batch_seconds:
            return SimulatedClock(dict(enumerate(self.clock.per_learner_batch_seconds)))
        return SimulatedClock(self.clock.batch_seconds)

    def time_column(self) -> str:
        return (
            "cumulative_sim_seconds"
            if self.clock.kind == "simulated"
            else "cumulative_wall_seconds"
        )


_SECTIONS = {
    "task": TaskConfig,
    "model": ModelConfig,
    "partition": PartitionConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "clock": ClockConfig,
    "run": RunConfig,
}

# TOML spells the policy's lambda out in full; the dataclass field is `lam`.
_KEY_ALIASES = {("policy", "lambda"): "lam"}


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomlkit.parse(path.read_text(encoding="utf-8"))
    except Exception as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return config_from_dict(doc.unwrap())


def config_from_dict(raw: dict) -> ExperimentConfig:
    config = ExperimentConfig()
    for section, value in raw.items():
        cls = _SECTIONS.get(str(section))
        if cls is None:
            raise ConfigError(f"{section}: unknown config section")
        if not isinstance(value, dict):
            raise ConfigError(f"{section}: expected a table")
        target = getattr(config, str(section))
        for key, item in value.items():
            key = _KEY_ALIASES.get((str(section), str(key)), str(key))
            if not hasattr(target, key):
                raise ConfigError(f"{section}.{key}: unknown config field")
            default = getattr(target, key)
            try:
                setattr(target, key, _coerce(default, item, f"{section}.{key}"))
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def _coerce(default, item, where: str):
    if isinstance(default, bool):
        if not isinstance(item, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return item
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(item, bool) or not isinstance(item, int):
            raise ConfigError(f"{where}: expected an integer")
        return int(item)
    if isinstance(default, float):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(item)
    if isinstance(default, str):
        if not isinstance(item, str):
            raise ConfigError(f"{where}: expected a string")
        return str(item)
    if isinstance(default, list):
        if not isinstance(item, list):
            raise ConfigError(f"{where}: expected an array")
        return [float(v) if isinstance(v, (int, float)) else v for v in item]
    raise ConfigError(f"{where}: unsupported field type")


def dump_config(config: ExperimentConfig) -> str:
    """Resolved configuration as TOML (every default filled in)."""
    doc = tomlkit.document()
    for section in _SECTIONS:
        table = tomlkit.table()
        for key, value in asdict(getattr(config, section)).items():
            toml_key = "lambda" if (section, key) == ("policy", "lam") else key
            table[toml_key] = value
        doc[section] = table
    return tomlkit.dumps(doc)


def write_config_echo(config: ExperimentConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_path = out_dir / "config_echo.toml"
    echo_path.write_text(dump_config(config), encoding="utf-8")
    return echo_path
