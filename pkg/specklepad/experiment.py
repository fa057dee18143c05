"""
Experiment sweeps: a JSON config expands into (architecture, patch size,
fold) jobs that are trained, scored and recorded under a run directory.
A ledger of finished jobs lets an interrupted run pick up where it stopped.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
import json
import logging
import os
from pathlib import Path
import threading
import time
from typing import Any, Dict, List, Mapping, Optional, Tuple

from more_itertools import first, map_reduce, peekable
import numpy as np

from specklepad import __version__
from specklepad.architectures import SPATIAL_SIZES, ArchKind, build
from specklepad.data import Manifest
from specklepad.error import ConfigurationError, DataError, SpecklePadError
from specklepad.metrics import THRESHOLD, MetricsReport, ScoreSet, aggregate_folds, evaluate, write_roc_csv
from specklepad.optim import BETA1, BETA2, EPSILON
from specklepad.partition import (
    DEFAULT_ATTACK_VAL_FRAC,
    DEFAULT_BONAFIDE_FRACS,
    DEFAULT_FOLDS,
    DEFAULT_VAL_FRAC,
    FoldPlan,
    Strategy,
    kfold_plan,
    loao_plan,
)
from specklepad.patching import DEFAULT_ROI, PatchSpec
from specklepad.training import ClipStore, TrainConfig, score_samples, train
from specklepad.weights import load_weights, save_weights

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SPECKLEPAD_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

CONFIG_FILE = "config.json"
EFFECTIVE_CONFIG_FILE = "effective_config.json"
PLAN_FILE = "plan.json"
LEDGER_FILE = "jobs.jsonl"
RUN_FILE = "run.json"
EVAL_FILE = "eval.json"
SUMMARY_FILE = "summary.csv"
WEIGHTS_FILE = "weights.spw"
REPORT_FILE = "report.json"
ROC_FILE = "roc.csv"
SCORES_FILE = "scores.json"
HISTORY_FILE = "history.json"

SUMMARY_COLUMNS = ("apcer", "bpcer", "acer", "bpcer20", "auc")


def default_output_root() -> str:
    """output root from the environment, or ./runs"""
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


@dataclass(frozen=True)
class ExperimentConfig:
    """A sweep over architectures and patch sizes on one manifest"""

    manifest: str
    archs: Tuple[ArchKind, ...] = (ArchKind.Lstm,)
    spatial: Tuple[int, ...] = (8,)
    temporal: Tuple[int, ...] = (100,)
    strategy: Strategy = Strategy.ThreeFold
    folds: int = DEFAULT_FOLDS
    val_frac: float = DEFAULT_VAL_FRAC
    bonafide_fracs: Tuple[float, float, float] = DEFAULT_BONAFIDE_FRACS
    attack_val_frac: float = DEFAULT_ATTACK_VAL_FRAC
    roi: int = DEFAULT_ROI
    stride: Optional[int] = None
    train_stride: Optional[int] = None
    offset: int = 0
    lr: float = 2e-4
    epochs: int = 50
    batch: int = 64
    oversample_attacks: bool = False
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON
    threshold: float = THRESHOLD
    seed: int = 0
    workers: int = 1
    score_workers: int = 1
    fail_fast: bool = False
    output_root: str = field(default_factory=default_output_root)

    def __post_init__(self) -> None:
        if not self.archs or not self.spatial or not self.temporal:
            raise ConfigurationError("Sweep lists must not be empty")
        unsupported = [s for s in self.spatial if s not in SPATIAL_SIZES]
        if unsupported:
            raise ConfigurationError(f"Unsupported spatial sizes {unsupported}", supported=SPATIAL_SIZES)
        if any(t < 1 for t in self.temporal):
            raise ConfigurationError("Temporal sizes must be positive", temporal=self.temporal)
        if self.workers < 1 or self.score_workers < 1:
            raise ConfigurationError("Worker counts must be positive")
        if not 0 <= self.threshold <= 1:
            raise ConfigurationError(f"Threshold must lie in [0, 1], got {self.threshold}")
        # fail early on bad training hyperparameters
        self.train_config(self.archs[0], self.spatial[0], self.temporal[0], self.seed)

    def patch_spec(self, side: int, t: int) -> PatchSpec:
        """patch spec of one sweep point"""
        return PatchSpec(side, side, t, self.stride, self.roi, self.train_stride, self.offset)

    def train_config(self, arch: ArchKind, side: int, t: int, seed: int) -> TrainConfig:
        """training hyperparameters of one job"""
        return TrainConfig(
            arch,
            self.patch_spec(side, t),
            self.lr,
            self.epochs,
            self.batch,
            seed,
            self.oversample_attacks,
            self.beta1,
            self.beta2,
            self.eps,
        )

    def with_overrides(self, **overrides: Any) -> ExperimentConfig:
        """replace the fields given a value; None leaves a field alone"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_json(self) -> Dict[str, Any]:
        """plain dict, the inverse of `from_dict`"""
        raw = asdict(self)
        raw["archs"] = [a.name for a in self.archs]
        raw["strategy"] = self.strategy.value
        for name in ("spatial", "temporal", "bonafide_fracs"):
            raw[name] = list(raw[name])
        return raw

    @staticmethod
    def from_dict(raw: Mapping[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
        """Parse a config object; a relative manifest path resolves against `base_dir`"""
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"Unknown config keys {unknown}")
        if "manifest" not in raw:
            raise ConfigurationError("Config needs a manifest path")
        values = dict(raw)
        manifest = Path(values["manifest"])
        if not manifest.is_absolute() and base_dir is not None:
            manifest = base_dir / manifest
        values["manifest"] = str(manifest)
        try:
            if "archs" in values:
                archs = values["archs"]
                values["archs"] = tuple(ArchKind.parse(a) for a in ([archs] if isinstance(archs, str) else archs))
            if "strategy" in values:
                values["strategy"] = Strategy.parse(values["strategy"])
            for name in ("spatial", "temporal"):
                if name in values:
                    values[name] = tuple(int(v) for v in values[name])
            if "bonafide_fracs" in values:
                values["bonafide_fracs"] = tuple(float(v) for v in values["bonafide_fracs"])
            return ExperimentConfig(**values)
        except (TypeError, ValueError) as error:
            raise ConfigurationError(f"Invalid experiment config: {error}") from error

    @staticmethod
    def from_json(path: str | os.PathLike[str]) -> ExperimentConfig:
        """Read a JSON config file"""
        raw = _read_json(Path(path), ConfigurationError)
        if not isinstance(raw, dict):
            raise ConfigurationError("Experiment config must be a JSON object", path=str(path))
        return ExperimentConfig.from_dict(raw, Path(path).resolve().parent)


def _read_json(path: Path, error_type: type[SpecklePadError] = DataError) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as error:
        raise error_type(f"Cannot read {path.name}: {error}", path=str(path)) from error
    except json.JSONDecodeError as error:
        raise error_type(f"{path.name} is not valid JSON: {error}", path=str(path)) from error


def _write_json(path: Path, value: Any) -> None:
    path.write_text(json.dumps(value, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True, order=True)
class Job:
    """one (architecture, patch size, fold) training and evaluation"""

    arch: ArchKind
    side: int
    t: int
    fold: int

    @property
    def config_key(self) -> str:
        """the sweep point, shared by all folds"""
        return f"{self.arch.name}-{self.side}x{self.side}x{self.t}"

    @property
    def key(self) -> str:
        """unique job name, also its directory name"""
        return f"{self.config_key}-fold{self.fold}"

    def seeds(self, base: int) -> Tuple[int, int]:
        """(build seed, training seed), independent of scheduling order"""
        state = np.random.SeedSequence([base, int(self.arch), self.side, self.t, self.fold]).generate_state(2)
        return int(state[0]), int(state[1])


def plan_jobs(cfg: ExperimentConfig, folds: int) -> List[Job]:
    """every job of the sweep, in report order"""
    return [
        Job(arch, side, t, fold)
        for arch in cfg.archs
        for side in cfg.spatial
        for t in cfg.temporal
        for fold in range(folds)
    ]


def group_by_region(cfg: ExperimentConfig, jobs: List[Job]) -> List[List[Job]]:
    """
    Jobs bunched by the clip geometry they read, first appearance first, so
    each geometry's cached clips can be released once its jobs are done
    """
    grouped = map_reduce(jobs, keyfunc=lambda job: ClipStore.region_key(cfg.patch_spec(job.side, job.t)))
    return list(grouped.values())


@dataclass(frozen=True)
class JobRecord:
    """One ledger line"""

    job: str
    status: str
    seconds: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        """the job finished and its artifacts are on disk"""
        return self.status == "ok"


def read_ledger(run_dir: Path) -> Dict[str, JobRecord]:
    """
    Latest record per job. A torn final line (the run was killed while
    writing it) is ignored; a malformed line anywhere else is an error.
    """
    path = run_dir / LEDGER_FILE
    if not path.exists():
        return {}
    records: Dict[str, JobRecord] = {}
    lines = peekable(line for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
    for line in lines:
        try:
            record = JobRecord(**json.loads(line))
        except (json.JSONDecodeError, TypeError) as error:
            if not lines:
                logger.warning("ignoring torn last line of %s", path)
                break
            raise DataError(f"Corrupt job ledger line: {line!r}", path=str(path)) from error
        records[record.job] = record
    return records


def repair_ledger(run_dir: Path) -> None:
    """Drop a torn final line so the next record starts on a line of its own"""
    path = run_dir / LEDGER_FILE
    if not path.exists():
        return
    text = path.read_text(encoding="utf-8")
    if not text or text.endswith("\n"):
        return
    cut = text.rfind("\n") + 1
    try:
        JobRecord(**json.loads(text[cut:]))
        path.write_text(text + "\n", encoding="utf-8")
    except (json.JSONDecodeError, TypeError):
        logger.warning("dropping torn last line of %s", path)
        path.write_text(text[:cut], encoding="utf-8")


def make_plan(cfg: ExperimentConfig, manifest: Manifest) -> FoldPlan:
    """partition the manifest the way the config asks"""
    match cfg.strategy:
        case Strategy.ThreeFold:
            plan = kfold_plan(manifest, cfg.folds, cfg.val_frac, cfg.seed)
        case Strategy.LOAO:
            plan = loao_plan(manifest, cfg.bonafide_fracs, cfg.seed, cfg.attack_val_frac)
    plan.check(manifest)
    return plan


def create_run_dir(root: str | os.PathLike[str]) -> Path:
    """A fresh timestamped directory under the output root"""
    base = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    candidate = base / f"run-{stamp}"
    suffix = 1
    while candidate.exists():
        candidate = base / f"run-{stamp}-{suffix}"
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


def prepare_run(cfg: ExperimentConfig, config_text: Optional[str] = None) -> Path:
    """Create the run directory and snapshot the input and the effective config"""
    run_dir = create_run_dir(cfg.output_root)
    snapshot = config_text if config_text is not None else json.dumps(cfg.to_json(), indent=2) + "\n"
    (run_dir / CONFIG_FILE).write_text(snapshot, encoding="utf-8")
    _write_json(run_dir / EFFECTIVE_CONFIG_FILE, cfg.to_json())
    logger.info("run directory %s", run_dir)
    return run_dir


def load_run_config(run_dir: Path) -> ExperimentConfig:
    """the effective config a run was started with"""
    raw = _read_json(run_dir / EFFECTIVE_CONFIG_FILE, ConfigurationError)
    return ExperimentConfig.from_dict(raw)


def load_plan(run_dir: Path, cfg: ExperimentConfig, manifest: Manifest) -> FoldPlan:
    """the run's saved fold plan, created on first use"""
    path = run_dir / PLAN_FILE
    if path.exists():
        plan = FoldPlan.from_json(_read_json(path))
        plan.check(manifest)
        return plan
    plan = make_plan(cfg, manifest)
    _write_json(path, plan.to_json())
    return plan


def _open_manifest(cfg: ExperimentConfig) -> Manifest:
    if not Path(cfg.manifest).exists():
        raise ConfigurationError("Manifest does not exist", path=cfg.manifest)
    return Manifest.read(cfg.manifest)


def run_job(job: Job, cfg: ExperimentConfig, plan: FoldPlan, store: ClipStore, run_dir: Path) -> MetricsReport:
    """Train one job, score its test split and write its artifacts"""
    split = plan.folds[job.fold]
    build_seed, train_seed = job.seeds(cfg.seed)
    net = build(job.arch, job.side, job.side, job.t, build_seed)
    net, history = train(net, split, store, cfg.train_config(job.arch, job.side, job.t, train_seed))
    scores = score_samples(net, split.test, store, cfg.patch_spec(job.side, job.t), cfg.score_workers)
    report = evaluate(scores, cfg.threshold)

    job_dir = run_dir / "jobs" / job.key
    job_dir.mkdir(parents=True, exist_ok=True)
    save_weights(net, job_dir / WEIGHTS_FILE)
    _write_json(job_dir / REPORT_FILE, report.to_json())
    _write_json(job_dir / SCORES_FILE, scores.to_json())
    _write_json(job_dir / HISTORY_FILE, history.to_json())
    write_roc_csv(job_dir / ROC_FILE, report.roc)
    return report


@dataclass
class RunRecord:
    """Everything a finished (or partly finished) run produced"""

    config: Dict[str, Any]
    version: str
    jobs: List[Dict[str, Any]]
    aggregates: Dict[str, Any]
    wall_clock: float

    def to_json(self) -> Dict[str, Any]:
        """plain dict, ready for json.dumps"""
        return asdict(self)


def _load_report(run_dir: Path, job: Job) -> MetricsReport:
    return MetricsReport.from_json(_read_json(run_dir / "jobs" / job.key / REPORT_FILE))


def collect_run(run_dir: Path, cfg: ExperimentConfig, jobs: List[Job], wall_clock: float) -> RunRecord:
    """Assemble the run record from the ledger and the per-job reports"""
    ledger = read_ledger(run_dir)
    entries = []
    finished: List[Tuple[Job, MetricsReport]] = []
    for job in jobs:
        record = ledger.get(job.key)
        entry: Dict[str, Any] = {"job": job.key, "status": record.status if record else "missing"}
        if record is not None and record.ok:
            report = _load_report(run_dir, job)
            entry["report"] = report.to_json()
            finished.append((job, report))
        elif record is not None:
            entry["error"] = record.error
        entries.append(entry)
    grouped = map_reduce(finished, keyfunc=lambda pair: pair[0].config_key, valuefunc=lambda pair: pair[1])
    aggregates = {key: aggregate_folds(reports).to_json() for key, reports in grouped.items()}
    return RunRecord(cfg.to_json(), __version__, entries, aggregates, wall_clock)


def run_experiment(cfg: ExperimentConfig, run_dir: Path) -> RunRecord:
    """
    Run every job of the sweep that the ledger does not already list as
    finished. Failed jobs are recorded and skipped unless `fail_fast` is set.
    """
    started = time.perf_counter()
    manifest = _open_manifest(cfg)
    plan = load_plan(run_dir, cfg, manifest)
    jobs = plan_jobs(cfg, len(plan.folds))
    repair_ledger(run_dir)
    done = {key for key, record in read_ledger(run_dir).items() if record.ok}
    pending = [job for job in jobs if job.key not in done]
    if done:
        logger.info("resuming: %d of %d jobs already finished", len(jobs) - len(pending), len(jobs))
    store = ClipStore.from_manifest(manifest)
    ledger_lock = threading.Lock()
    groups = group_by_region(cfg, pending)
    outstanding = {id(group): len(group) for group in groups}

    def settle(job: Job, group: List[Job]) -> None:
        with ledger_lock:
            outstanding[id(group)] -= 1
            done_with_group = outstanding[id(group)] == 0
        if done_with_group:
            store.release(cfg.patch_spec(job.side, job.t))

    def execute(job: Job, group: List[Job]) -> Tuple[JobRecord, Optional[BaseException]]:
        logger.info("starting %s", job.key)
        begin = time.perf_counter()
        failure: Optional[BaseException] = None
        try:
            report = run_job(job, cfg, plan, store, run_dir)
            record = JobRecord(job.key, "ok", time.perf_counter() - begin)
            logger.info("finished %s: ACER %s AUC %s", job.key, report.acer, report.auc)
        except (SpecklePadError, FloatingPointError) as error:
            failure = error
            record = JobRecord(job.key, "failed", time.perf_counter() - begin, f"{type(error).__name__}: {error}")
            logger.warning("job %s failed: %s", job.key, record.error)
        with ledger_lock, open(run_dir / LEDGER_FILE, "a", encoding="utf-8") as ledger:
            ledger.write(json.dumps(asdict(record)) + "\n")
        settle(job, group)
        return record, failure

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(execute, job, group) for group in groups for job in group]
        for future in futures:
            _, failure = future.result()
            if failure is not None and cfg.fail_fast:
                pool.shutdown(wait=True, cancel_futures=True)
                raise failure

    record = collect_run(run_dir, cfg, jobs, time.perf_counter() - started)
    _write_json(run_dir / RUN_FILE, record.to_json())
    return record


def evaluate_run(run_dir: Path, workers: Optional[int] = None) -> Dict[str, Any]:
    """
    Reload the weights of every finished job, re-score its test split and
    compare with the scores recorded at training time
    """
    cfg = load_run_config(run_dir)
    manifest = _open_manifest(cfg)
    plan = load_plan(run_dir, cfg, manifest)
    ledger = read_ledger(run_dir)
    store = ClipStore.from_manifest(manifest)
    results: Dict[str, Any] = {}
    finished = [job for job in plan_jobs(cfg, len(plan.folds)) if job.key in ledger and ledger[job.key].ok]
    for group in group_by_region(cfg, finished):
        for job in group:
            job_dir = run_dir / "jobs" / job.key
            net = load_weights(job_dir / WEIGHTS_FILE)
            spec = cfg.patch_spec(job.side, job.t)
            scores = score_samples(net, plan.folds[job.fold].test, store, spec, workers or cfg.score_workers)
            recorded = ScoreSet.from_json(_read_json(job_dir / SCORES_FILE))
            matches = scores == recorded
            if not matches:
                logger.warning("re-scored %s differs from the scores recorded at training time", job.key)
            results[job.key] = {"matches_recorded": matches, "report": evaluate(scores, cfg.threshold).to_json()}
        store.release(cfg.patch_spec(group[0].side, group[0].t))
    results = {job.key: results[job.key] for job in finished}
    _write_json(run_dir / EVAL_FILE, results)
    return results


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    """one sweep point aggregated over its finished folds"""

    config_key: str
    arch: str
    geometry: str
    folds_done: int
    folds_total: int
    stats: Dict[str, Tuple[Optional[float], Optional[float]]]
    best: bool = False


def _cell(stat: Tuple[Optional[float], Optional[float]]) -> str:
    mean, std = stat
    return "" if mean is None or std is None else f"{mean:.3f}±{std:.3f}"


def summarize(run_dir: Path) -> List[SummaryRow]:
    """One row per sweep point of the run's config; unfinished points have empty cells"""
    cfg = load_run_config(run_dir)
    plan_path = run_dir / PLAN_FILE
    folds = len(_read_json(plan_path)["folds"]) if plan_path.exists() else cfg.folds
    ledger = read_ledger(run_dir)
    jobs = plan_jobs(cfg, folds)
    grouped = map_reduce(jobs, keyfunc=lambda job: job.config_key)
    rows = []
    for key, members in grouped.items():
        reports = [_load_report(run_dir, job) for job in members if (r := ledger.get(job.key)) and r.ok]
        stats: Dict[str, Tuple[Optional[float], Optional[float]]] = {name: (None, None) for name in SUMMARY_COLUMNS}
        if reports:
            summary = aggregate_folds(reports)
            stats = {name: (summary.stats[name].mean, summary.stats[name].std) for name in SUMMARY_COLUMNS}
        sample = members[0]
        rows.append(
            SummaryRow(key, sample.arch.name, f"{sample.side}x{sample.side}x{sample.t}", len(reports), folds, stats)
        )
    best = first(
        sorted((r for r in rows if r.stats["acer"][0] is not None), key=lambda r: r.stats["acer"][0] or 0.0),
        default=None,
    )
    return [replace(row, best=row is best) for row in rows]


def write_summary_csv(path: Path, rows: List[SummaryRow]) -> None:
    """mean and std in separate columns; missing values stay empty"""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        header = ["arch", "geometry", "folds_done", "folds_total", "best"]
        for name in SUMMARY_COLUMNS:
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)
        for row in rows:
            line: List[Any] = [row.arch, row.geometry, row.folds_done, row.folds_total, "*" if row.best else ""]
            for name in SUMMARY_COLUMNS:
                line += ["" if v is None else repr(v) for v in row.stats[name]]
            writer.writerow(line)


def format_summary(rows: List[SummaryRow]) -> str:
    """fixed-width text table, best ACER marked with *"""
    header = f"  {'arch':<6} {'patch':<12} {'folds':<6}" + "".join(f" {name.upper():>13}" for name in SUMMARY_COLUMNS)
    lines = [header]
    for row in rows:
        marker = "*" if row.best else " "
        cells = "".join(f" {_cell(row.stats[name]):>13}" for name in SUMMARY_COLUMNS)
        lines.append(f"{marker} {row.arch:<6} {row.geometry:<12} {row.folds_done}/{row.folds_total:<4}{cells}")
    return "\n".join(lines)


def report_run(run_dir: Path) -> str:
    """Write summary.csv and return the text table"""
    rows = summarize(run_dir)
    write_summary_csv(run_dir / SUMMARY_FILE, rows)
    return format_summary(rows)
