"""End-to-end federation runs: wires the controller state machine, learner
executors, and transport sessions together.

In-process mode launches one thread per learner plus per-session controller
handlers; frames still travel as encoded bytes through the shared codec, so
message counters and wire behavior match the distributed (TCP) mode exactly.

Round trip per federation round: the controller sends each learner an ASSIGN
frame carrying the community model and batch budget, each learner answers
with an UPDATE frame carrying its trained model. The calibration pass (round
0) exchanges no model payloads: learners rebuild the initial model locally
from the shared seed and only report timing, which keeps the model-message
count of a run at exactly 2 * learners * rounds.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass

from fedorch.config import ExperimentConfig
from fedorch.controller import (
    FederationAborted,
    FederationController,
    Phase,
    RoundRecord,
)
from fedorch.learner import (
    Clock,
    LocalUpdate,
    TaskAssignment,
    execute_task,
)
from fedorch.models import Dataset, Hyperparams, ModelSpec, ParameterVector, init_model
from fedorch.policy import LearnerProfile, epoch_time
from fedorch.transport import (
    Envelope,
    MessageKind,
    Session,
    TransportClosedError,
    accept,
    connect,
    decode_assign,
    decode_error,
    decode_register,
    decode_update,
    encode_error,
    encode_register,
    encode_update,
    encode_assign,
    listen,
    make_channel_pair,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0


@dataclass
class FederationResult:
    records: list[RoundRecord]
    community: ParameterVector
    profiles: list[LearnerProfile]
    model_messages: int
    calibration_seconds: float
    policy_tag: str


# ------------------------------------------------------------- learner side


def learner_client(
    session: Session,
    spec: ModelSpec,
    shard: Dataset,
    learner_index: int,
    clock: Clock,
    batch_size: int,
    training_gate=None,
) -> None:
    """Protocol loop of one learner: register, then serve ASSIGN frames until
    SHUTDOWN. Failures are reported as ERROR frames before re-raising.

    `training_gate` bounds how many co-located learners compute at once; the
    in-process runner passes a semaphore because interleaving tiny numpy steps
    across threads only buys GIL contention. Timing semantics are unaffected:
    each learner's busy time is its own compute (simulated or measured).
    """
    layout = spec.layout()
    gate = training_gate if training_gate is not None else contextlib.nullcontext()
    try:
        session.send(
            Envelope(
                kind=MessageKind.REGISTER,
                learner_index=learner_index,
                payload=encode_register(shard.num_rows, batch_size, 0.0),
            )
        )
        while True:
            env = session.recv()
            if env.kind == MessageKind.SHUTDOWN:
                log.info("learner %d: shutdown", learner_index)
                return
            if env.kind == MessageKind.ERROR:
                raise FederationAborted(
                    f"controller error: {decode_error(env.payload)}"
                )
            if env.kind == MessageKind.COMMUNITY:
                # Final community model push; nothing to do beyond accepting it.
                continue
            if env.kind != MessageKind.ASSIGN:
                raise FederationAborted(f"unexpected {env.kind.name} frame")

            num_batches, lr, assigned_beta, seed, params = decode_assign(env.payload, layout)
            if params is None:
                # Calibration pass: both sides derive the initial model locally.
                params = init_model(spec, seed)
            assignment = TaskAssignment(
                round_num=env.round_num,
                params=params,
                num_batches=num_batches,
                hyperparams=Hyperparams(learning_rate=lr, batch_size=assigned_beta, seed=seed),
            )
            with gate:
                update = execute_task(spec, assignment, shard, learner_index, clock)
            is_calibration = env.round_num == 0
            session.send(
                Envelope(
                    kind=MessageKind.UPDATE,
                    round_num=env.round_num,
                    learner_index=learner_index,
                    payload=encode_update(
                        update.num_examples,
                        update.observed_batch_time,
                        update.batches_executed,
                        update.busy_seconds,
                        None if is_calibration else update.params,
                    ),
                )
            )
    except TransportClosedError:
        log.info("learner %d: channel closed", learner_index)
    except Exception as exc:
        try:
            session.send(
                Envelope(
                    kind=MessageKind.ERROR,
                    learner_index=learner_index,
                    payload=encode_error(f"{type(exc).__name__}: {exc}"),
                )
            )
        except Exception:
            pass
        raise
    finally:
        session.close()


# ---------------------------------------------------------- controller side


class _ControllerServer:
    """Receives frames from N learner sessions and drives the controller."""

    def __init__(self, controller: FederationController, test: Dataset):
        self.controller = controller
        self.test = test
        self.sessions: dict[int, Session] = {}
        self.layout = controller.community.layout
        self.shutting_down = False
        self._threads: list[threading.Thread] = []

    def serve_session(self, session: Session) -> None:
        thread = threading.Thread(target=self._session_loop, args=(session,), daemon=True)
        thread.start()
        self._threads.append(thread)

    def _session_loop(self, session: Session) -> None:
        learner_index: int | None = None
        try:
            while True:
                env = session.recv()
                if env.kind == MessageKind.REGISTER:
                    learner_index = self._handle_register(session, env)
                elif env.kind == MessageKind.UPDATE:
                    self._handle_update(env)
                elif env.kind == MessageKind.ERROR:
                    self.controller.fail(
                        f"learner {env.learner_index} failed in round "
                        f"{self.controller.round_num}: {decode_error(env.payload)}"
                    )
                    return
                else:
                    self.controller.fail(f"unexpected {env.kind.name} frame from learner")
                    return
        except TransportClosedError:
            if not self.shutting_down:
                who = "unregistered learner" if learner_index is None else f"learner {learner_index}"
                self.controller.fail(
                    f"{who} disconnected in round {self.controller.round_num}"
                )
        except FederationAborted:
            pass
        except Exception as exc:  # ValueError from state machine, decode errors
            who = "?" if learner_index is None else str(learner_index)
            self.controller.fail(
                f"protocol error from learner {who} in round "
                f"{self.controller.round_num}: {exc}"
            )

    def _handle_register(self, session: Session, env: Envelope) -> int:
        num_examples, batch_size, hint = decode_register(env.payload)
        index = self.controller.register_learner(
            env.learner_index,
            num_examples,
            batch_size,
            batch_seconds_hint=hint if hint > 0 else None,
        )
        self.sessions[index] = session
        return index

    def _handle_update(self, env: Envelope) -> None:
        num_examples, t_batch, batches, busy, params = decode_update(env.payload, self.layout)
        if env.round_num == 0:
            self.controller.receive_calibration(env.learner_index, t_batch)
            return
        self.controller.receive_update(
            LocalUpdate(
                learner_index=env.learner_index,
                round_num=env.round_num,
                params=params,
                num_examples=num_examples,
                observed_batch_time=t_batch,
                batches_executed=batches,
                busy_seconds=busy,
            )
        )

    def broadcast_assignments(self, assignments: dict[int, TaskAssignment]) -> None:
        for k in sorted(assignments):
            a = assignments[k]
            self.sessions[k].send(
                Envelope(
                    kind=MessageKind.ASSIGN,
                    round_num=a.round_num,
                    learner_index=k,
                    payload=encode_assign(
                        a.num_batches,
                        a.hyperparams.learning_rate,
                        a.hyperparams.batch_size,
                        a.hyperparams.seed,
                        a.params,
                    ),
                )
            )

    def broadcast_calibration(self) -> None:
        hp = self.controller.hyperparams
        for k, batches in sorted(self.controller.calibration_assignments().items()):
            self.sessions[k].send(
                Envelope(
                    kind=MessageKind.ASSIGN,
                    round_num=0,
                    learner_index=k,
                    payload=encode_assign(
                        batches, hp.learning_rate, hp.batch_size, hp.seed, None
                    ),
                )
            )

    def shutdown(self) -> None:
        self.shutting_down = True
        for k, session in self.sessions.items():
            try:
                session.send(Envelope(kind=MessageKind.SHUTDOWN, learner_index=k))
            except TransportClosedError:
                pass
        for thread in self._threads:
            thread.join(timeout=10)
        for session in self.sessions.values():
            session.close()

    def abort(self, reason: str) -> None:
        """Tell surviving learners the run is dead before closing channels."""
        self.shutting_down = True
        for k, session in self.sessions.items():
            try:
                session.send(
                    Envelope(
                        kind=MessageKind.ERROR,
                        learner_index=k,
                        payload=encode_error(reason),
                    )
                )
            except TransportClosedError:
                pass
            session.close()

    def model_messages(self) -> int:
        return sum(
            s.counters.models_sent + s.counters.models_received
            for s in self.sessions.values()
        )


def _orchestrate(
    server: _ControllerServer,
    rounds: int,
    target_mae: float,
    timeout: float,
) -> FederationResult:
    controller = server.controller
    try:
        controller.wait_phase(Phase.CALIBRATING, timeout=timeout)
        server.broadcast_calibration()
        controller.wait_phase(Phase.READY, timeout=timeout)
        profiles = controller.profiles()
        calibration_seconds = max(epoch_time(p) for p in profiles)
        log.info(
            "calibration complete in %.3f s (sim/wall per slowest learner)",
            calibration_seconds,
        )

        for _ in range(rounds):
            assignments = controller.start_round()
            server.broadcast_assignments(assignments)
            controller.wait_phase(Phase.AGGREGATING, timeout=timeout)
            record = controller.complete_round(server.test)
            log.info(
                "round %d: mse=%.6f mae=%.6f (%.3f s)",
                record.round_num, record.metrics.mse, record.metrics.mae,
                record.round_seconds,
            )
            if target_mae > 0 and record.metrics.mae <= target_mae:
                log.info("target MAE %.6f reached; stopping early", target_mae)
                break
    except FederationAborted as exc:
        server.abort(str(exc))
        raise

    controller.finish()
    server.shutdown()
    return FederationResult(
        records=list(controller.history),
        community=controller.community,
        profiles=profiles,
        model_messages=server.model_messages(),
        calibration_seconds=calibration_seconds,
        policy_tag=controller.policy.tag(),
    )


# ------------------------------------------------------------- entry points


def _learner_thread_main(*args) -> None:
    # Thread-mode learners already reported their failure to the controller
    # as an ERROR frame; re-raising in a daemon thread would only add noise.
    try:
        learner_client(*args)
    except Exception as exc:
        log.info("learner thread ended with %s: %s", type(exc).__name__, exc)


def run_federation(config: ExperimentConfig) -> FederationResult:
    """Run a complete in-process federation for the given configuration."""
    config.validate()
    train, test = config.datasets()
    shards = config.shards(train)
    spec = config.model_spec()
    clock = config.clock_obj()
    controller = FederationController(
        model_spec=spec,
        policy=config.policy_obj(),
        num_learners=config.partition.num_learners,
        hyperparams=config.hyperparams(),
        timing_ema=config.train.timing_ema,
    )
    server = _ControllerServer(controller, test)

    training_gate = threading.BoundedSemaphore(1)
    learner_threads: list[threading.Thread] = []
    for shard in shards:
        controller_side, learner_side = make_channel_pair()
        server.serve_session(controller_side)
        thread = threading.Thread(
            target=_learner_thread_main,
            args=(learner_side, spec, shard.data, shard.learner_index, clock,
                  config.train.batch_size, training_gate),
            daemon=True,
        )
        learner_threads.append(thread)

    for thread in learner_threads:
        thread.start()
    try:
        result = _orchestrate(
            server,
            rounds=config.train.rounds,
            target_mae=config.train.target_mae,
            timeout=DEFAULT_TIMEOUT,
        )
    finally:
        server.shutting_down = True
        for session in server.sessions.values():
            session.close()
    for thread in learner_threads:
        thread.join(timeout=10)
    return result


def run_distributed_controller(
    config: ExperimentConfig,
    host: str,
    port: int,
    ready_event: threading.Event | None = None,
) -> FederationResult:
    """Controller half of a distributed run: listen, accept N learners, train."""
    config.validate()
    _, test = config.datasets()
    controller = FederationController(
        model_spec=config.model_spec(),
        policy=config.policy_obj(),
        num_learners=config.partition.num_learners,
        hyperparams=config.hyperparams(),
        timing_ema=config.train.timing_ema,
    )
    server = _ControllerServer(controller, test)
    listener = listen(host, port)
    log.info("controller listening on %s:%d", host, listener.getsockname()[1])
    if ready_event is not None:
        ready_event.set()
    try:
        for _ in range(config.partition.num_learners):
            server.serve_session(accept(listener, timeout=DEFAULT_TIMEOUT))
        return _orchestrate(
            server,
            rounds=config.train.rounds,
            target_mae=config.train.target_mae,
            timeout=DEFAULT_TIMEOUT,
        )
    finally:
        listener.close()


def run_distributed_learner(
    config: ExperimentConfig, host: str, port: int, learner_index: int
) -> None:
    """Learner half of a distributed run: derive the local shard from the
    shared configuration, dial the controller, and serve assignments."""
    config.validate()
    if not 0 <= learner_index < config.partition.num_learners:
        raise ValueError(
            f"learner index {learner_index} outside federation of "
            f"{config.partition.num_learners}"
        )
    train, _ = config.datasets()
    shard = config.shards(train)[learner_index]
    session = connect(host, port)
    learner_client(
        session,
        config.model_spec(),
        shard.data,
        learner_index,
        config.clock_obj(),
        config.train.batch_size,
    )
