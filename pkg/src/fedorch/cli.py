"""Command-line experiment harness.

Subcommands:
    run               federated training (in-process or distributed)
    centralized       matched-work centralized baseline on the undivided data
    partition         write per-learner shard CSVs plus a manifest
    inspect-schedule  print the per-round work allocation for the config

Every run writes a rounds CSV and a resolved config echo into --out. The log
level is taken from the FEDORCH_LOG environment variable (default WARNING).

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from fedorch.config import ConfigError, ExperimentConfig, load_config, write_config_echo
from fedorch.controller import FederationAborted
from fedorch.data import export_shards
from fedorch.learner import train_centralized
from fedorch.models import Metrics, evaluate, init_model
from fedorch.policy import LearnerProfile, busy_times, epoch_time, idle_time, plan_for
from fedorch.runtime import (
    run_distributed_controller,
    run_distributed_learner,
    run_federation,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ["round", None, "mse", "rmse", "mae", "corr", "policy_tag", "messages_cumulative"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedorch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config path (defaults to the shipped preset)")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")

    p_run = sub.add_parser("run", help="run a federated training experiment")
    common(p_run)
    p_run.add_argument(
        "--mode", choices=["inprocess", "distributed"], help="overrides run.mode"
    )
    p_run.add_argument("--listen", metavar="ADDR:PORT", help="distributed: act as controller")
    p_run.add_argument("--connect", metavar="ADDR:PORT", help="distributed: act as learner")
    p_run.add_argument(
        "--learner-index", type=int, default=None,
        help="distributed learner: which shard/identity to assume",
    )
    p_run.set_defaults(func=cmd_run)

    p_central = sub.add_parser("centralized", help="matched-work centralized baseline")
    common(p_central)
    p_central.set_defaults(func=cmd_centralized)

    p_part = sub.add_parser("partition", help="write shard CSVs and a manifest")
    common(p_part)
    p_part.set_defaults(func=cmd_partition)

    p_sched = sub.add_parser("inspect-schedule", help="print the round work allocation")
    common(p_sched)
    p_sched.set_defaults(func=cmd_inspect_schedule)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDORCH_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        config.validate()
        if args.out:
            config.run.output_dir = args.out
        if getattr(args, "mode", None):
            config.run.mode = args.mode
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FederationAborted, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--listen/--connect: expected HOST:PORT, got {addr!r}")
    return host, int(port)


def _time_cell(value: float) -> str:
    return str(float(value))


def write_rounds_csv(path: Path, rows: list[dict], time_column: str) -> None:
    fields = [f or time_column for f in CSV_FIELDS]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _metric_cells(metrics: Metrics) -> dict:
    return {
        "mse": _time_cell(metrics.mse),
        "rmse": _time_cell(metrics.rmse),
        "mae": _time_cell(metrics.mae),
        "corr": _time_cell(metrics.corr),
    }


def cmd_run(args, config: ExperimentConfig) -> int:
    if config.run.mode == "distributed":
        if args.connect and args.listen:
            raise ConfigError("--listen and --connect are mutually exclusive")
        if args.connect:
            if args.learner_index is None:
                raise ConfigError("--learner-index: required with --connect")
            host, port = _parse_addr(args.connect)
            run_distributed_learner(config, host, port, args.learner_index)
            return 0
        if not args.listen:
            raise ConfigError("run.mode 'distributed' needs --listen or --connect")
        host, port = _parse_addr(args.listen)
        result = run_distributed_controller(config, host, port)
    else:
        result = run_federation(config)

    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = config.partition.num_learners
    rows = []
    cumulative = 0.0
    for record in result.records:
        cumulative += record.round_seconds
        rows.append(
            {
                "round": record.round_num,
                config.time_column(): _time_cell(cumulative),
                **_metric_cells(record.metrics),
                "policy_tag": result.policy_tag,
                "messages_cumulative": 2 * n * record.round_num,
            }
        )
    write_rounds_csv(out_dir / "rounds.csv", rows, config.time_column())
    write_config_echo(config, out_dir)

    print(f"policy: {result.policy_tag}")
    print(f"rounds completed: {len(result.records)}")
    print(f"model messages: {result.model_messages}")
    if result.records:
        final = result.records[-1].metrics
        print(
            f"final metrics: mse={final.mse:.6f} rmse={final.rmse:.6f} "
            f"mae={final.mae:.6f} corr={final.corr:.6f}"
        )
    print(f"wrote {out_dir / 'rounds.csv'}")
    return 0


def cmd_centralized(args, config: ExperimentConfig) -> int:
    train, test = config.datasets()
    spec = config.model_spec()
    if config.policy.kind == "sync":
        epochs = config.train.rounds * config.policy.local_epochs
    else:
        epochs = int(config.train.rounds * config.policy.lam)
    params = init_model(spec, config.train.seed)
    history = train_centralized(
        spec, params, train, epochs, config.hyperparams(), config.clock_obj()
    )

    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    cumulative = 0.0
    metrics = evaluate(spec, params, test)
    rows.append(
        {
            "round": 0,
            config.time_column(): _time_cell(0.0),
            **_metric_cells(metrics),
            "policy_tag": "centralized",
            "messages_cumulative": 0,
        }
    )
    for epoch, (epoch_params, seconds) in enumerate(history, start=1):
        cumulative += seconds
        metrics = evaluate(spec, epoch_params, test)
        rows.append(
            {
                "round": epoch,
                config.time_column(): _time_cell(cumulative),
                **_metric_cells(metrics),
                "policy_tag": "centralized",
                "messages_cumulative": 0,
            }
        )
    write_rounds_csv(out_dir / "rounds.csv", rows, config.time_column())
    write_config_echo(config, out_dir)
    print(f"centralized epochs: {epochs}")
    print(
        f"final metrics: mse={metrics.mse:.6f} rmse={metrics.rmse:.6f} "
        f"mae={metrics.mae:.6f} corr={metrics.corr:.6f}"
    )
    print(f"wrote {out_dir / 'rounds.csv'}")
    return 0


def cmd_partition(args, config: ExperimentConfig) -> int:
    train, _ = config.datasets()
    shards = config.shards(train)
    manifest = export_shards(shards, Path(config.run.output_dir))
    print(f"{len(shards)} shards written; manifest: {manifest}")
    for shard in shards:
        targets = shard.data.targets
        print(
            f"learner {shard.learner_index}: {shard.num_examples} rows, "
            f"targets [{targets.min():.3f}, {targets.max():.3f}]"
        )
    return 0


def cmd_inspect_schedule(args, config: ExperimentConfig) -> int:
    if config.clock.kind != "simulated":
        raise ConfigError(
            "clock.kind: inspect-schedule needs explicit simulated batch times"
        )
    train, _ = config.datasets()
    shards = config.shards(train)
    clock = config.clock_obj()
    profiles = [
        # Shard sizes and configured batch costs stand in for calibration here.
        LearnerProfile(
            learner_index=s.learner_index,
            num_examples=s.num_examples,
            batch_size=min(config.train.batch_size, s.num_examples),
            batch_seconds=clock.cost_for(s.learner_index),
        )
        for s in shards
    ]
    policy = config.policy_obj()
    plan = plan_for(profiles, policy)
    idle = idle_time(profiles, plan)
    busy = busy_times(profiles, plan)

    print(f"policy: {policy.tag()}")
    if plan.t_max is not None:
        print(f"t_max: {plan.t_max:.3f} s")
    header = f"{'learner':>7} {'examples':>9} {'batch_s':>8} {'epoch_s':>10} {'batches':>9} {'busy_s':>10} {'idle_s':>10}"
    print(header)
    print("-" * len(header))
    for p in profiles:
        k = p.learner_index
        print(
            f"{k:>7} {p.num_examples:>9} {p.batch_seconds:>8.4f} "
            f"{epoch_time(p):>10.3f} {plan.batches_for(k):>9} "
            f"{busy[k]:>10.3f} {idle[k]:>10.3f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
