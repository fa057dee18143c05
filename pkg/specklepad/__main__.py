"""
Run as a CLI
"""

from argparse import ArgumentParser, Namespace
import json
import logging
from pathlib import Path
import sys
from typing import List, NoReturn, Optional

from specklepad.data import Manifest
from specklepad.error import ConfigurationError, NumericError, SpecklePadError, handle
from specklepad.experiment import (
    ExperimentConfig,
    evaluate_run,
    load_run_config,
    prepare_run,
    report_run,
    run_experiment,
)
from specklepad.partition import (
    DEFAULT_ATTACK_VAL_FRAC,
    DEFAULT_BONAFIDE_FRACS,
    DEFAULT_FOLDS,
    DEFAULT_VAL_FRAC,
    Strategy,
    kfold_plan,
    loao_plan,
)
from specklepad.synth import DEFAULT_BONAFIDE, DEFAULT_GEOMETRY, DEFAULT_SUBJECTS, default_counts, make_synth_dataset

logger = logging.getLogger("specklepad")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CommandLineParser(ArgumentParser):
    """Reports usage errors as configuration errors instead of exiting"""

    def error(self, message: str) -> NoReturn:
        raise ConfigurationError(message, usage=self.format_usage().strip())


cli = CommandLineParser(
    prog="specklepad",
    description="Presentation attack detection experiments on laser speckle fingerprint captures",
)
cli.add_argument("-v", "--verbose", action="count", default=0, help="Repeat for more log output")
commands = cli.add_subparsers(dest="command", required=True)

synth = commands.add_parser("synth", help="Generate a synthetic dataset and its manifest")
synth.add_argument("out_dir", type=str, help="Directory for the sample files and manifest.json")
synth.add_argument("--seed", type=int, default=0)
synth.add_argument("--bonafide", type=int, default=DEFAULT_BONAFIDE, help="Number of bona fide samples")
synth.add_argument("--subjects", type=int, default=DEFAULT_SUBJECTS)
synth.add_argument(
    "--geometry", type=int, nargs=3, default=list(DEFAULT_GEOMETRY), metavar=("H", "W", "T"), help="Cube size"
)
synth.add_argument("--workers", type=int, default=1)

split = commands.add_parser("split", help="Partition a manifest into folds")
split.add_argument("manifest", type=str, help="A manifest.json file")
split.add_argument("--strategy", type=str, default="kfold", help="kfold or loao")
split.add_argument("--folds", type=int, default=DEFAULT_FOLDS)
split.add_argument("--val-frac", type=float, default=DEFAULT_VAL_FRAC)
split.add_argument("--bonafide-fracs", type=float, nargs=3, default=list(DEFAULT_BONAFIDE_FRACS))
split.add_argument("--attack-val-frac", type=float, default=DEFAULT_ATTACK_VAL_FRAC)
split.add_argument("--seed", type=int, default=0)
split.add_argument("-o", "--output", type=str, default=None, help="Write the plan here instead of stdout")

train = commands.add_parser("train", help="Train and test every job of a sweep")
source = train.add_mutually_exclusive_group(required=True)
source.add_argument("config", type=str, nargs="?", default=None, help="Experiment config (JSON)")
source.add_argument("--resume", type=str, default=None, metavar="RUN_DIR", help="Continue an interrupted run")
train.add_argument("--seed", type=int, default=None)
train.add_argument("--epochs", type=int, default=None)
train.add_argument("--workers", type=int, default=None)
train.add_argument("--output-root", type=str, default=None)
train.add_argument("--fail-fast", action="store_true", default=None)

evaluate = commands.add_parser("eval", help="Re-score a run from its saved weights")
evaluate.add_argument("run_dir", type=str)
evaluate.add_argument("--workers", type=int, default=None)

report = commands.add_parser("report", help="Summarize a run as a table")
report.add_argument("run_dir", type=str)


def configure_logging(verbosity: int) -> None:
    """WARNING by default, INFO with -v, DEBUG with -vv"""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)


def cmd_synth(args: Namespace) -> None:
    """generate a dataset"""
    manifest = make_synth_dataset(
        args.out_dir,
        default_counts(args.bonafide),
        subjects=args.subjects,
        seed=args.seed,
        geometry=tuple(args.geometry),
        workers=args.workers,
    )
    print(json.dumps({"samples": len(manifest), "classes": manifest.class_counts()}))


def cmd_split(args: Namespace) -> None:
    """write a fold plan"""
    manifest = Manifest.read(args.manifest)
    match Strategy.parse(args.strategy):
        case Strategy.ThreeFold:
            plan = kfold_plan(manifest, args.folds, args.val_frac, args.seed)
        case Strategy.LOAO:
            plan = loao_plan(manifest, tuple(args.bonafide_fracs), args.seed, args.attack_val_frac)
    plan.check(manifest)
    text = json.dumps(plan.to_json(), indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_train(args: Namespace) -> None:
    """run or resume a sweep"""
    if args.resume:
        run_dir = Path(args.resume)
        if not run_dir.is_dir():
            raise ConfigurationError("Run directory does not exist", path=str(run_dir))
        # only the scheduling knobs may change on resume
        cfg = load_run_config(run_dir).with_overrides(workers=args.workers, fail_fast=args.fail_fast)
    else:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigurationError(f"Cannot read config: {error}", path=args.config) from error
        cfg = ExperimentConfig.from_json(args.config).with_overrides(
            seed=args.seed,
            epochs=args.epochs,
            workers=args.workers,
            output_root=args.output_root,
            fail_fast=args.fail_fast,
        )
        run_dir = prepare_run(cfg, text)
    record = run_experiment(cfg, run_dir)
    failed = [job["job"] for job in record.jobs if job["status"] != "ok"]
    print(f"{run_dir}: {len(record.jobs) - len(failed)} of {len(record.jobs)} jobs finished")
    if failed:
        logger.warning("failed jobs: %s", ", ".join(failed))


def cmd_eval(args: Namespace) -> None:
    """re-score a run"""
    results = evaluate_run(Path(args.run_dir), args.workers)
    differing = sorted(key for key, result in results.items() if not result["matches_recorded"])
    print(f"re-scored {len(results)} jobs, {len(differing)} differ from the recorded scores")


def cmd_report(args: Namespace) -> None:
    """print the summary table"""
    print(report_run(Path(args.run_dir)))


def main(argv: Optional[List[str]] = None) -> int:
    """parse arguments, dispatch, and turn errors into exit codes"""
    handlers = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}
    try:
        args = cli.parse_args(argv)
        configure_logging(args.verbose)
        handlers[args.command](args)
    except SpecklePadError as error:
        return handle(error)
    except FloatingPointError as error:
        return handle(NumericError(str(error)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
