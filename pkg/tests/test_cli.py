import csv
import threading
from pathlib import Path

import numpy as np
import pytest

from fedorch.cli import main
from fedorch.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    dump_config,
    load_config,
)
from fedorch.data import load_csv
from fedorch.runtime import run_distributed_controller, run_distributed_learner


def small_config_toml(out_dir, scheme="uniform_iid", policy="sync", rounds=3):
    return f"""
[task]
input_dim = 3
n_train = 120
n_test = 40
noise_sigma = 0.2

[partition]
scheme = "{scheme}"
num_learners = 3

[policy]
kind = "{policy}"
local_epochs = 2
lambda = 2.0

[train]
rounds = {rounds}
learning_rate = 0.002
seed = 11

[clock]
kind = "simulated"
batch_seconds = 0.05

[run]
output_dir = "{out_dir}"
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(small_config_toml(tmp_path / "out"))
    return path


def read_rounds(out_dir):
    with (Path(out_dir) / "rounds.csv").open() as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------- config


def test_shipped_default_values():
    cfg = ExperimentConfig()
    assert cfg.train.learning_rate == 5e-5
    assert cfg.train.batch_size == 1
    assert cfg.train.seed == 1990
    assert cfg.train.rounds == 25
    assert cfg.policy.local_epochs == 4
    assert cfg.policy.lam == 4.0
    assert cfg.partition.num_learners == 8
    assert cfg.clock.batch_seconds == 0.12
    cfg.validate()


def test_unknown_field_named_in_error():
    with pytest.raises(ConfigError, match="train.bogus"):
        config_from_dict({"train": {"bogus": 3}})
    with pytest.raises(ConfigError, match="nonsense"):
        config_from_dict({"nonsense": {}})


def test_bad_value_named_in_error():
    with pytest.raises(ConfigError, match="policy.kind"):
        config_from_dict({"policy": {"kind": "other"}})
    with pytest.raises(ConfigError, match="train.rounds"):
        config_from_dict({"train": {"rounds": "many"}})


def test_lambda_alias_round_trips():
    cfg = config_from_dict({"policy": {"kind": "semisync", "lambda": 2.5}})
    assert cfg.policy.lam == 2.5
    assert "lambda = 2.5" in dump_config(cfg)


def test_config_echo_reloads_identically(tmp_path, config_path):
    cfg = load_config(config_path)
    echo = tmp_path / "echo.toml"
    echo.write_text(dump_config(cfg))
    assert load_config(echo) == cfg


def test_csv_task_requires_paths():
    with pytest.raises(ConfigError, match="task.train_path"):
        config_from_dict({"task": {"kind": "csv"}})


# ------------------------------------------------------------------ run


def test_run_writes_expected_csv(config_path, tmp_path):
    assert main(["run", "--config", str(config_path)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 3
    assert rows[0]["round"] == "1"
    assert rows[-1]["messages_cumulative"] == str(2 * 3 * 3)
    assert rows[0]["policy_tag"] == "SyncFedAvg(E=2)"
    assert list(rows[0]) == [
        "round", "cumulative_sim_seconds", "mse", "rmse", "mae", "corr",
        "policy_tag", "messages_cumulative",
    ]
    times = [float(r["cumulative_sim_seconds"]) for r in rows]
    assert times == sorted(times)
    assert (tmp_path / "out" / "config_echo.toml").exists()


def test_rerun_is_byte_identical(config_path, tmp_path):
    assert main(["run", "--config", str(config_path)]) == 0
    first = (tmp_path / "out" / "rounds.csv").read_bytes()
    assert main(["run", "--config", str(config_path)]) == 0
    second = (tmp_path / "out" / "rounds.csv").read_bytes()
    assert first == second


def test_sync_and_semisync_share_schema(tmp_path):
    for policy in ("sync", "semisync"):
        cfg = tmp_path / f"{policy}.toml"
        cfg.write_text(small_config_toml(tmp_path / policy, policy=policy, rounds=2))
        assert main(["run", "--config", str(cfg)]) == 0
    sync_rows = read_rounds(tmp_path / "sync")
    semi_rows = read_rounds(tmp_path / "semisync")
    assert list(sync_rows[0]) == list(semi_rows[0])
    assert sync_rows[0]["policy_tag"] == "SyncFedAvg(E=2)"
    assert semi_rows[0]["policy_tag"] == "SemiSync(lambda=2.0)"


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[policy]\nkind = 'nope'\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2


def test_early_stop_on_target_mae(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        small_config_toml(tmp_path / "out", rounds=50)
        + "\n[task]\nnoise_sigma = 0.0\n".replace("[task]\n", "")
    )
    # rewrite with a reachable target instead
    text = small_config_toml(tmp_path / "out", rounds=50)
    text = text.replace("[train]", "[train]\ntarget_mae = 20.0")
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) < 50
    assert float(rows[-1]["mae"]) <= 20.0


# ---------------------------------------------------------------- centralized


def test_centralized_writes_epoch_rows(config_path, tmp_path):
    assert main(["centralized", "--config", str(config_path)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 1 + 3 * 2  # epoch 0 plus R*E epochs
    assert rows[0]["round"] == "0"
    assert all(r["policy_tag"] == "centralized" for r in rows)
    assert all(r["messages_cumulative"] == "0" for r in rows)


def test_centralized_zero_rounds_gives_initial_metrics(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(small_config_toml(tmp_path / "out", rounds=0))
    assert main(["centralized", "--config", str(cfg)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 1
    assert rows[0]["round"] == "0"


# ------------------------------------------------------------------ partition


def test_partition_writes_manifest_counts(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(small_config_toml(tmp_path / "parts"))
    assert main(["partition", "--config", str(cfg)]) == 0
    manifest = (tmp_path / "parts" / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "learner_index,rows,target_min,target_max"
    counts = [int(line.split(",")[1]) for line in manifest[1:]]
    assert sum(counts) == 120
    assert max(counts) - min(counts) <= 1
    shard = load_csv(tmp_path / "parts" / "shard_0.csv")
    assert shard.num_rows == counts[0]


def test_partition_noniid_ranges_disjointish(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(small_config_toml(tmp_path / "parts", scheme="uniform_noniid"))
    assert main(["partition", "--config", str(cfg)]) == 0
    manifest = (tmp_path / "parts" / "manifest.csv").read_text().splitlines()[1:]
    ranges = [(float(r.split(",")[2]), float(r.split(",")[3])) for r in manifest]
    for (lo1, hi1), (lo2, hi2) in zip(ranges, ranges[1:]):
        assert hi1 <= lo2 + 1e-9  # narrow, ordered target bands


# ----------------------------------------------------------- inspect-schedule


def test_inspect_schedule_prints_plan(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(small_config_toml(tmp_path / "out", policy="semisync"))
    assert main(["inspect-schedule", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "t_max" in out
    assert "SemiSync(lambda=2.0)" in out
    assert "idle_s" in out


def test_inspect_schedule_requires_simulated_clock(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        small_config_toml(tmp_path / "out").replace('kind = "simulated"', 'kind = "monotonic"')
    )
    assert main(["inspect-schedule", "--config", str(cfg)]) == 2


# ---------------------------------------------------------------- distributed


def test_distributed_run_over_sockets(tmp_path):
    out = tmp_path / "dist"
    cfg = ExperimentConfig()
    cfg.task.input_dim = 3
    cfg.task.n_train = 60
    cfg.task.n_test = 20
    cfg.task.noise_sigma = 0.2
    cfg.partition.scheme = "uniform_iid"
    cfg.partition.num_learners = 2
    cfg.policy.kind = "sync"
    cfg.policy.local_epochs = 1
    cfg.train.rounds = 2
    cfg.train.learning_rate = 0.01
    cfg.train.seed = 5
    cfg.clock.batch_seconds = 0.1
    cfg.run.output_dir = str(out)
    results = {}

    # Bind a fixed free port first so learners know where to dial.
    import socket as socket_module

    probe = socket_module.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    ready_event = threading.Event()

    def run_controller():
        results["result"] = run_distributed_controller(cfg, "127.0.0.1", port, ready_event)

    controller_thread = threading.Thread(target=run_controller)
    controller_thread.start()
    assert ready_event.wait(timeout=10)

    learner_threads = [
        threading.Thread(target=run_distributed_learner, args=(cfg, "127.0.0.1", port, k))
        for k in range(2)
    ]
    for t in learner_threads:
        t.start()
    controller_thread.join(timeout=60)
    for t in learner_threads:
        t.join(timeout=10)

    result = results["result"]
    assert len(result.records) == 2
    assert result.model_messages == 2 * 2 * 2

    # In-process run of the identical config produces identical metrics.
    from fedorch.runtime import run_federation

    local = run_federation(cfg)
    assert [r.metrics for r in local.records] == [r.metrics for r in result.records]
    assert np.array_equal(local.community.values, result.community.values)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_run_exits_1_with_diagnostic(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    text = small_config_toml(tmp_path / "out")
    text = text.replace("learning_rate = 0.002", "learning_rate = 1e12")
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "learner" in err and "round" in err


def test_distributed_cli_subprocesses(tmp_path):
    import socket
    import subprocess
    import sys

    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    cfg = tmp_path / "c.toml"
    cfg.write_text(small_config_toml(tmp_path / "out", rounds=2))
    base = [sys.executable, "-m", "fedorch.cli", "run", "--config", str(cfg),
            "--mode", "distributed"]
    controller = subprocess.Popen(
        base + ["--listen", f"127.0.0.1:{port}"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    import time as time_module

    time_module.sleep(1.0)  # a beat for the listener to bind
    learners = [
        subprocess.Popen(
            base + ["--connect", f"127.0.0.1:{port}", "--learner-index", str(k)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        for k in range(3)
    ]
    out, err = controller.communicate(timeout=120)
    assert controller.returncode == 0, err
    for proc in learners:
        proc.communicate(timeout=30)
        assert proc.returncode == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 2
    assert rows[-1]["messages_cumulative"] == str(2 * 3 * 2)


def test_rerun_from_config_echo_is_byte_identical(config_path, tmp_path):
    assert main(["run", "--config", str(config_path)]) == 0
    first = (tmp_path / "out" / "rounds.csv").read_bytes()
    echo = tmp_path / "out" / "config_echo.toml"
    assert main(["run", "--config", str(echo), "--out", str(tmp_path / "replay")]) == 0
    second = (tmp_path / "replay" / "rounds.csv").read_bytes()
    assert first == second


def test_mlp_federation_end_to_end(tmp_path):
    cfg = tmp_path / "mlp.toml"
    cfg.write_text(
        small_config_toml(tmp_path / "out")
        .replace('[policy]', '[model]\nkind = "mlp"\nhidden_dims = [6]\n\n[policy]')
    )
    assert main(["run", "--config", str(cfg)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 3
    maes = [float(r["mae"]) for r in rows]
    assert all(np.isfinite(m) for m in maes)
    assert maes[-1] < maes[0]


def test_monotonic_clock_run_uses_wall_column(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        small_config_toml(tmp_path / "out", rounds=2).replace(
            'kind = "simulated"\nbatch_seconds = 0.05', 'kind = "monotonic"'
        )
    )
    assert main(["run", "--config", str(cfg)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert "cumulative_wall_seconds" in rows[0]
    times = [float(r["cumulative_wall_seconds"]) for r in rows]
    assert times == sorted(times)


def test_csv_task_federated_run(tmp_path):
    from fedorch.data import SyntheticTaskSpec, generate_synthetic, save_csv

    task = SyntheticTaskSpec(input_dim=3, noise_sigma=0.2, target_low=0.0, target_high=5.0)
    save_csv(generate_synthetic(task, 90, seed=1), tmp_path / "train.csv")
    save_csv(generate_synthetic(task, 30, seed=2), tmp_path / "test.csv")
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"""
[task]
kind = "csv"
train_path = "{tmp_path / 'train.csv'}"
test_path = "{tmp_path / 'test.csv'}"

[partition]
scheme = "uniform_noniid"
num_learners = 3
buckets_per_learner = 2

[policy]
kind = "sync"
local_epochs = 1

[train]
rounds = 2
learning_rate = 0.01
seed = 3

[run]
output_dir = "{tmp_path / 'out'}"
""")
    assert main(["run", "--config", str(cfg)]) == 0
    rows = read_rounds(tmp_path / "out")
    assert len(rows) == 2


def test_heterogeneous_batch_costs_semisync(tmp_path):
    cfg_text = small_config_toml(tmp_path / "out", policy="semisync", rounds=2).replace(
        "batch_seconds = 0.05",
        "batch_seconds = 0.05\nper_learner_batch_seconds = [0.05, 0.1, 0.2]",
    )
    cfg = tmp_path / "c.toml"
    cfg.write_text(cfg_text)
    assert main(["inspect-schedule", "--config", str(cfg)]) == 0
    assert main(["run", "--config", str(cfg)]) == 0

    from fedorch.config import load_config
    from fedorch.policy import LearnerProfile, busy_times, semisync_allocations

    config = load_config(cfg)
    train, _ = config.datasets()
    shards = config.shards(train)
    clock = config.clock_obj()
    profiles = [
        LearnerProfile(s.learner_index, s.num_examples, 1, clock.cost_for(s.learner_index))
        for s in shards
    ]
    plan = semisync_allocations(profiles, lam=2.0)
    # Slower learners get proportionally fewer batches; busy times align.
    assert plan.allocations[0] > plan.allocations[1] > plan.allocations[2]
    busy = busy_times(profiles, plan)
    assert max(busy.values()) - min(busy.values()) < 0.2 + 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_distributed_abort_reaches_all_learners(tmp_path):
    import socket as socket_module

    from fedorch.config import ExperimentConfig
    from fedorch.controller import FederationAborted
    from fedorch.runtime import run_distributed_controller, run_distributed_learner

    cfg = ExperimentConfig()
    cfg.task.input_dim = 3
    cfg.task.n_train = 60
    cfg.task.n_test = 20
    cfg.partition.scheme = "uniform_iid"
    cfg.partition.num_learners = 2
    cfg.policy.kind = "sync"
    cfg.policy.local_epochs = 1
    cfg.train.rounds = 3
    cfg.train.learning_rate = 1e12  # diverges within the first round
    cfg.train.seed = 5
    cfg.run.output_dir = str(tmp_path / "out")

    probe = socket_module.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    ready = threading.Event()
    failures = {}

    def run_controller():
        try:
            run_distributed_controller(cfg, "127.0.0.1", port, ready)
        except FederationAborted as exc:
            failures["controller"] = str(exc)

    def run_learner(k):
        try:
            run_distributed_learner(cfg, "127.0.0.1", port, k)
        except Exception as exc:
            failures[k] = type(exc).__name__

    controller_thread = threading.Thread(target=run_controller)
    controller_thread.start()
    assert ready.wait(timeout=10)
    learner_threads = [threading.Thread(target=run_learner, args=(k,)) for k in range(2)]
    for t in learner_threads:
        t.start()
    controller_thread.join(timeout=60)
    for t in learner_threads:
        t.join(timeout=20)
        assert not t.is_alive(), "a learner hung after the abort"
    # The run died with a diagnostic naming the learner and round; learners
    # ended too (their own divergence, the ERROR broadcast, or channel close).
    assert "learner" in failures["controller"] and "round" in failures["controller"]
