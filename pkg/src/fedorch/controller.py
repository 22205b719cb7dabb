"""Federation controller: the star-topology head that registers learners,
opens rounds, collects local models, aggregates them into the community
model, and evaluates it after every round.

The state machine is explicit and every operation checks its phase:

    awaiting_registration -> calibrating -> ready
    ready -> round_open -> aggregating -> ready   (one federation round)
    ready -> finished

The calibration pass (round 0) runs one local epoch per learner purely to
measure per-batch time; its model output is discarded and it does not count
as a federation round. All mutating methods are serialized by an internal
condition variable, so transport session threads may call them concurrently.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum

from fedorch.aggregation import weighted_average
from fedorch.learner import LocalUpdate, TaskAssignment
from fedorch.models import Dataset, Hyperparams, Metrics, ModelSpec, ParameterVector, evaluate, init_model
from fedorch.policy import LearnerProfile, Policy, SchedulePlan, plan_for

log = logging.getLogger(__name__)


class Phase(str, Enum):
    AWAITING_REGISTRATION = "awaiting_registration"
    CALIBRATING = "calibrating"
    READY = "ready"
    ROUND_OPEN = "round_open"
    AGGREGATING = "aggregating"
    FINISHED = "finished"


class StateError(RuntimeError):
    """An operation was invoked in the wrong phase."""


class FederationAborted(RuntimeError):
    """A learner failed; the run stops loudly (no fault tolerance in v1)."""


@dataclass(frozen=True)
class RoundRecord:
    """Everything the controller knows about one completed round."""

    round_num: int
    plan: SchedulePlan
    updates_received: int
    round_seconds: float
    metrics: Metrics
    messages_sent: int
    messages_received: int


@dataclass
class _Registration:
    learner_index: int
    num_examples: int
    batch_size: int
    batch_seconds: float | None = None  # filled by calibration

    def profile(self) -> LearnerProfile:
        if self.batch_seconds is None:
            raise StateError(f"learner {self.learner_index} has no timing yet")
        return LearnerProfile(
            learner_index=self.learner_index,
            num_examples=self.num_examples,
            batch_size=self.batch_size,
            batch_seconds=self.batch_seconds,
        )


class FederationController:
    def __init__(
        self,
        model_spec: ModelSpec,
        policy: Policy,
        num_learners: int,
        hyperparams: Hyperparams,
        timing_ema: bool = False,
    ):
        if num_learners < 1:
            raise ValueError("num_learners must be positive")
        self.model_spec = model_spec
        self.policy = policy
        self.num_learners = num_learners
        self.hyperparams = hyperparams
        self.timing_ema = timing_ema
        self.community: ParameterVector = init_model(model_spec, hyperparams.seed)
        self.round_num = 0
        self.history: list[RoundRecord] = []
        self.registry: dict[int, _Registration] = {}
        self._phase = Phase.AWAITING_REGISTRATION
        self._calibration_pending: set[int] = set()
        self._updates: dict[int, LocalUpdate] = {}
        self._plan: SchedulePlan | None = None
        self._failure: str | None = None
        self._cond = threading.Condition()

    # ------------------------------------------------------------- phase ops

    @property
    def phase(self) -> Phase:
        return self._phase

    def _transition(self, new: Phase) -> None:
        log.info("phase %s -> %s (round %d)", self._phase.value, new.value, self.round_num)
        self._phase = new
        self._cond.notify_all()

    def _require(self, *allowed: Phase) -> None:
        if self._failure is not None:
            raise FederationAborted(self._failure)
        if self._phase not in allowed:
            raise StateError(
                f"operation requires phase {'/'.join(p.value for p in allowed)}, "
                f"state is {self._phase.value}"
            )

    def wait_phase(self, *phases: Phase, timeout: float | None = None) -> Phase:
        """Block until the controller reaches one of the phases (or fails)."""
        with self._cond:
            ok = self._cond.wait_for(
                lambda: self._phase in phases or self._failure is not None,
                timeout=timeout,
            )
            if self._failure is not None:
                raise FederationAborted(self._failure)
            if not ok:
                raise TimeoutError(f"controller stuck in {self._phase.value}")
            return self._phase

    def fail(self, reason: str) -> None:
        """Record a fatal learner/transport failure and wake all waiters."""
        with self._cond:
            log.error("federation aborted: %s", reason)
            self._failure = reason
            self._cond.notify_all()

    # ---------------------------------------------------------- registration

    def register_learner(
        self,
        learner_index: int,
        num_examples: int,
        batch_size: int,
        batch_seconds_hint: float | None = None,
    ) -> int:
        with self._cond:
            self._require(Phase.AWAITING_REGISTRATION)
            if not 0 <= learner_index < self.num_learners:
                raise ValueError(
                    f"learner_index {learner_index} outside federation of "
                    f"{self.num_learners}"
                )
            if learner_index in self.registry:
                raise ValueError(f"learner {learner_index} already registered")
            if num_examples < 1:
                raise ValueError("a learner must hold at least one example")
            self.registry[learner_index] = _Registration(
                learner_index, num_examples, batch_size, batch_seconds_hint
            )
            log.info(
                "registered learner %d (%d examples, batch %d)",
                learner_index, num_examples, batch_size,
            )
            if len(self.registry) == self.num_learners:
                self._calibration_pending = set(self.registry)
                self._transition(Phase.CALIBRATING)
            return learner_index

    # ----------------------------------------------------------- calibration

    def calibration_assignments(self) -> dict[int, int]:
        """Batch counts for the timing pass: one local epoch per learner."""
        with self._cond:
            self._require(Phase.CALIBRATING)
            return {
                k: -(-r.num_examples // min(r.batch_size, r.num_examples))
                for k, r in self.registry.items()
            }

    def receive_calibration(self, learner_index: int, observed_batch_time: float) -> bool:
        with self._cond:
            self._require(Phase.CALIBRATING)
            if learner_index not in self._calibration_pending:
                raise ValueError(f"unexpected calibration report from {learner_index}")
            if not observed_batch_time > 0:
                raise ValueError("observed batch time must be positive")
            self.registry[learner_index].batch_seconds = observed_batch_time
            self._calibration_pending.discard(learner_index)
            if not self._calibration_pending:
                self._transition(Phase.READY)
                return True
            return False

    def profiles(self) -> list[LearnerProfile]:
        return [self.registry[k].profile() for k in sorted(self.registry)]

    # ---------------------------------------------------------------- rounds

    def start_round(self) -> dict[int, TaskAssignment]:
        with self._cond:
            self._require(Phase.READY)
            self._plan = plan_for(self.profiles(), self.policy)
            self.round_num += 1
            self._updates = {}
            assignments = {
                k: TaskAssignment(
                    round_num=self.round_num,
                    params=self.community,
                    num_batches=self._plan.batches_for(k),
                    hyperparams=self.hyperparams,
                )
                for k in sorted(self.registry)
            }
            self._transition(Phase.ROUND_OPEN)
            return assignments

    def receive_update(self, update: LocalUpdate) -> bool:
        """Buffer one learner's round result; True once all N are in."""
        with self._cond:
            self._require(Phase.ROUND_OPEN)
            k = update.learner_index
            if k not in self.registry:
                raise ValueError(f"update from unknown learner {k}")
            if update.round_num != self.round_num:
                raise ValueError(
                    f"update for round {update.round_num} during round {self.round_num}"
                )
            if k in self._updates:
                raise ValueError(f"duplicate update from learner {k} in round {self.round_num}")
            if not update.params.same_layout(self.community):
                self.fail(
                    f"learner {k} returned a mismatched parameter layout in "
                    f"round {self.round_num}; aborting"
                )
                raise FederationAborted(self._failure)
            expected = self._plan.batches_for(k)
            if update.batches_executed != expected:
                self.fail(
                    f"learner {k} executed {update.batches_executed} batches, "
                    f"assigned {expected} (round {self.round_num})"
                )
                raise FederationAborted(self._failure)
            self._updates[k] = update
            if len(self._updates) == self.num_learners:
                self._transition(Phase.AGGREGATING)
                return True
            return False

    def complete_round(self, test: Dataset) -> RoundRecord:
        """Aggregate buffered updates, evaluate, and append the record."""
        with self._cond:
            self._require(Phase.AGGREGATING)
            ordered = [self._updates[k] for k in sorted(self._updates)]
            self.community = weighted_average(
                [(u.params, float(u.num_examples)) for u in ordered]
            )
            if self.timing_ema:
                for u in ordered:
                    reg = self.registry[u.learner_index]
                    reg.batch_seconds = 0.5 * reg.batch_seconds + 0.5 * u.observed_batch_time
            record = RoundRecord(
                round_num=self.round_num,
                plan=self._plan,
                updates_received=len(ordered),
                round_seconds=max(u.busy_seconds for u in ordered),
                metrics=evaluate(self.model_spec, self.community, test),
                messages_sent=self.num_learners,
                messages_received=self.num_learners,
            )
            self.history.append(record)
            self._updates = {}
            self._transition(Phase.READY)
            return record

    def finish(self) -> None:
        with self._cond:
            self._require(Phase.READY)
            self._transition(Phase.FINISHED)
