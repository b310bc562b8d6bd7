"""
egoflow command-line driver.

    python main.py synth      [--config PATH] [--seed N] [--out DIR]
    python main.py partition  --dataset DIR --frame K [--config PATH] [--out DIR]
    python main.py train      --dataset DIR [--config PATH] [--seed N] [--out DIR]
    python main.py eval       --log FILE [--config PATH] [--out DIR]
    python main.py selfcheck  [--seed N] [--out DIR]
    python main.py localize   [--config PATH] [--seed N] [--out DIR]

Every output directory receives resolved_config.json. Exit codes: 0 success,
1 usage or configuration, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from config import RunConfig, resolve_run_config, write_resolved_config
from errors import EgoFlowError, InvalidInputError, NumericFailure, exit_code_for
from metrics import evaluate_log, read_trajectory_log, write_metrics_csv
from rig_geometry import PanoramicRig, PartitionReport, SizePower, partition_columns, partition_levels
from selfcheck import SELFCHECK_CSV_NAME, run_selfcheck, write_selfcheck_csv
from synth_harness import generate_sequence, read_dataset, write_dataset
from task_enhance import run_localization, write_localization_csv
from tensor_io import write_tensor
from training import LOSS_CSV_NAME, train_on_sequence

logger = logging.getLogger("egoflow")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LAYOUT_NAME = "layout.json"
METRICS_CSV_NAME = "metrics.csv"
LOCALIZATION_CSV_NAME = "localization.csv"


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for data errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def configure_logging() -> None:
    load_dotenv()
    name = os.getenv("EGOFLOW_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    if level == logging.INFO and name != "INFO":
        logger.warning(f"Unknown EGOFLOW_LOG_LEVEL '{name}', using INFO")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides scenario and training seeds")
    common.add_argument("--out", help="output directory (default: <out_dir>/<command>)")

    parser = CliParser(prog="egoflow", description="Ego-guided scene-flow modeling on a synthetic camera ring")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("synth", parents=[common], help="generate a synthetic dataset")

    partition = commands.add_parser("partition", parents=[common], help="dump one frame's partition")
    partition.add_argument("--dataset", required=True)
    partition.add_argument("--frame", type=int, default=0)

    train = commands.add_parser("train", parents=[common], help="train the flow modules on a dataset")
    train.add_argument("--dataset", required=True)

    evaluate = commands.add_parser("eval", parents=[common], help="FCP and L2 metrics of a trajectory log")
    evaluate.add_argument("--log", required=True)

    commands.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    commands.add_parser("localize", parents=[common], help="toy localization with and without enhancement")
    return parser


def output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    if args.out:
        return Path(config.out_dir)
    return Path(config.out_dir) / args.command


# ----- subcommands ---------------------------------------------------------------


def cmd_synth(config: RunConfig, out: Path) -> str:
    sequence = generate_sequence(config.scenario)
    write_dataset(sequence, out)
    write_resolved_config(config, out)
    return f"wrote {len(sequence.frames)} frames to {out}"


def cmd_partition(config: RunConfig, dataset: Path, frame: int, out: Path) -> str:
    sequence = read_dataset(dataset)
    if not 0 <= frame < len(sequence.frames):
        raise InvalidInputError(f"{dataset}: frame {frame} outside 0..{len(sequence.frames) - 1}")
    scenario = sequence.scenario or config.scenario
    rig = PanoramicRig.from_config(scenario.rig)
    power = SizePower.from_name(config.model.size_power)
    partitions = partition_levels(rig, sequence.pose_history(frame), scenario.ego_width, power)

    out.mkdir(parents=True, exist_ok=True)
    report = PartitionReport.from_partitions(frame, partitions)
    (out / LAYOUT_NAME).write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True))
    ring = sequence.frames[frame].ring()
    for p in partitions:
        write_tensor(out / f"units_level{p.layout.level}.flt", partition_columns(ring, p.layout))
    write_resolved_config(config, out)
    sizes = ", ".join(f"L{p.layout.level}=({p.layout.p_left:.3f}, {p.layout.p_right:.3f})" for p in partitions)
    return f"frame {frame}: start_s={report.start_s:.3f} sizes {sizes}"


def cmd_train(config: RunConfig, dataset: Path, out: Path) -> str:
    sequence = read_dataset(dataset)
    scenario = sequence.scenario or config.scenario
    rig = PanoramicRig.from_config(scenario.rig)
    result = train_on_sequence(sequence, rig, config.model, config.training, scenario.ego_width, out)
    write_resolved_config(config, out)
    start = "n/a" if result.initial_loss is None else f"{result.initial_loss:.6f}"
    return f"trained {len(result.history)} steps, loss {start} -> {result.final_loss:.6f}; {out / LOSS_CSV_NAME}"


def cmd_eval(config: RunConfig, log_file: Path, out: Path) -> str:
    log = read_trajectory_log(log_file)
    metrics = config.metrics
    rows = evaluate_log(log, metrics.thresholds, metrics.q_values, metrics.horizons, metrics.compliance)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out / METRICS_CSV_NAME)
    write_resolved_config(config, out)
    return f"{len(rows)} metrics over {len(log.clips)} clips written to {out / METRICS_CSV_NAME}"


def cmd_selfcheck(config: RunConfig, out: Path) -> str:
    results = run_selfcheck(config.training.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_selfcheck_csv(results, out / SELFCHECK_CSV_NAME)
    write_resolved_config(config, out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"selfcheck failed: {', '.join(failed)}; see {out / SELFCHECK_CSV_NAME}")
    return f"all {len(results)} checks passed"


def cmd_localize(config: RunConfig, out: Path, seed: Optional[int]) -> str:
    settings = config.localization
    if seed is not None:
        settings = settings.model_copy(update={"seeds": [seed]})
    out.mkdir(parents=True, exist_ok=True)
    reports = run_localization(settings, out / "data")
    write_localization_csv(reports, out / LOCALIZATION_CSV_NAME)
    write_resolved_config(config, out)
    lines = [f"seed {r.seed}: enhanced={r.enhanced_accuracy:.3f} baseline={r.baseline_accuracy:.3f}" for r in reports]
    return f"{settings.kind} localization, chance={reports[0].chance:.3f}; " + "; ".join(lines)


def run(args: argparse.Namespace) -> int:
    config = resolve_run_config(args.config, args.seed, args.out)
    out = output_dir(args, config)
    logger.info(f"Running {args.command} into {out}")
    if args.command == "synth":
        summary = cmd_synth(config, out)
    elif args.command == "partition":
        summary = cmd_partition(config, Path(args.dataset), args.frame, out)
    elif args.command == "train":
        summary = cmd_train(config, Path(args.dataset), out)
    elif args.command == "eval":
        summary = cmd_eval(config, Path(args.log), out)
    elif args.command == "selfcheck":
        summary = cmd_selfcheck(config, out)
    else:
        summary = cmd_localize(config, out, args.seed)
    print(f"{args.command}: {summary}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except EgoFlowError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{args.command}: error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        logger.error(f"{args.command} failed on {e.filename}: {e}")
        print(f"{args.command}: error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
