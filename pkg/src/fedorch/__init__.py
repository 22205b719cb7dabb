"""fedorch: a star-topology federated learning orchestrator and simulator.

Learners hold private data shards and train a shared regression model with
vanilla SGD; a federation controller aggregates their parameters into a
community model by example-count-weighted averaging. Two training policies
decide how much local work each round carries: a fixed number of local
epochs (synchronous), or an equal time budget derived from the slowest
learner's epoch time (semi-synchronous).
"""

from fedorch.aggregation import (
    ContributionWeights,
    normalize_weights,
    weighted_average,
    weights_from_examples,
)
from fedorch.config import ConfigError, ExperimentConfig, load_config
from fedorch.controller import (
    FederationAborted,
    FederationController,
    Phase,
    RoundRecord,
    StateError,
)
from fedorch.data import (
    PartitionPlan,
    Shard,
    SyntheticTaskSpec,
    bucket_by_target,
    generate_synthetic,
    load_csv,
    partition,
)
from fedorch.learner import (
    LocalUpdate,
    MonotonicClock,
    SimulatedClock,
    TaskAssignment,
    execute_task,
    hash_seed,
    train_centralized,
)
from fedorch.models import (
    Dataset,
    Hyperparams,
    Metrics,
    ModelSpec,
    ParameterVector,
    evaluate,
    forward,
    grad_mse,
    init_model,
    sgd_step,
)
from fedorch.policy import (
    LearnerProfile,
    SchedulePlan,
    SemiSyncPolicy,
    SyncPolicy,
    compute_tmax,
    epoch_time,
    idle_time,
    semisync_allocations,
    sync_allocations,
)
from fedorch.runtime import FederationResult, run_federation

__all__ = [
    "ConfigError",
    "ContributionWeights",
    "Dataset",
    "ExperimentConfig",
    "FederationAborted",
    "FederationController",
    "FederationResult",
    "Hyperparams",
    "LearnerProfile",
    "LocalUpdate",
    "Metrics",
    "ModelSpec",
    "MonotonicClock",
    "ParameterVector",
    "PartitionPlan",
    "Phase",
    "RoundRecord",
    "SchedulePlan",
    "SemiSyncPolicy",
    "Shard",
    "SimulatedClock",
    "StateError",
    "SyncPolicy",
    "SyntheticTaskSpec",
    "TaskAssignment",
    "bucket_by_target",
    "compute_tmax",
    "epoch_time",
    "evaluate",
    "execute_task",
    "forward",
    "generate_synthetic",
    "grad_mse",
    "hash_seed",
    "idle_time",
    "init_model",
    "load_config",
    "load_csv",
    "normalize_weights",
    "partition",
    "run_federation",
    "semisync_allocations",
    "sgd_step",
    "sync_allocations",
    "train_centralized",
    "weighted_average",
    "weights_from_examples",
]

__version__ = "0.1.0"
