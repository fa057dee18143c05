"""
ISO/IEC 30107-3 style presentation attack detection metrics. Attacks are the
positive class: APCER = FN / P, BPCER = FP / N.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
import math
import os
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from specklepad.data import Label, Species
from specklepad.error import DataError

THRESHOLD = 0.5
BPCER20_APCER = 0.05
ROC_GRID = np.linspace(0.0, 1.0, 1001)
# rates are ratios of small integers; this absorbs their rounding when compared with a target
RATE_SLACK = 1e-12

METRIC_NAMES = ("apcer", "bpcer", "acer", "bpcer20", "auc")


@dataclass(frozen=True)
class ScoredSample:
    """final score of one test sample"""

    sample_id: str
    label: Label
    score: float
    species: Optional[Species] = None


class ScoreSet:
    """Sample scores of one evaluated split, kept sorted by sample id"""

    def __init__(self, samples: Iterable[ScoredSample]) -> None:
        self.samples = sorted(samples, key=lambda s: s.sample_id)
        for sample in self.samples:
            if not 0.0 <= sample.score <= 1.0:
                raise DataError(f"Score {sample.score} of {sample.sample_id} is outside [0, 1]")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ScoredSample]:
        return iter(self.samples)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ScoreSet) and self.samples == other.samples

    def __hash__(self) -> int:
        return hash(tuple(self.samples))

    def scores(self, label: Label) -> np.ndarray:
        """scores of one class"""
        return np.array([s.score for s in self.samples if s.label is label], dtype=np.float64)

    def to_json(self) -> List[Dict[str, Any]]:
        """plain list, ready for json.dumps"""
        return [
            {
                "sample_id": s.sample_id,
                "label": s.label.value,
                "score": s.score,
                "species": s.species.value if s.species is not None else None,
            }
            for s in self.samples
        ]

    @staticmethod
    def from_json(raw: List[Dict[str, Any]]) -> ScoreSet:
        """inverse of `to_json`"""
        return ScoreSet(
            ScoredSample(
                obj["sample_id"],
                Label(obj["label"]),
                float(obj["score"]),
                Species(obj["species"]) if obj.get("species") else None,
            )
            for obj in raw
        )


@dataclass(frozen=True)
class PointMetrics:
    """Error rates at one threshold; a rate with an empty denominator is None"""

    apcer: Optional[float]
    bpcer: Optional[float]
    acer: Optional[float]
    p: int
    n: int
    fp: int
    fn: int


@dataclass(frozen=True)
class RocPoint:
    """operating point for the rule score ≥ threshold → attack"""

    threshold: float
    apcer: float
    bpcer: float


def _rate(count: int, total: int) -> Optional[float]:
    return count / total if total else None


def point_metrics(scores: ScoreSet, threshold: float = THRESHOLD) -> PointMetrics:
    """Confusion counts and error rates at a fixed threshold"""
    if len(scores) == 0:
        raise DataError("Cannot compute metrics for an empty score set")
    attacks = scores.scores(Label.Attack)
    bonafide = scores.scores(Label.BonaFide)
    fn = int(np.sum(attacks < threshold))
    fp = int(np.sum(bonafide >= threshold))
    apcer = _rate(fn, attacks.size)
    bpcer = _rate(fp, bonafide.size)
    acer = 0.5 * (apcer + bpcer) if apcer is not None and bpcer is not None else None
    return PointMetrics(apcer, bpcer, acer, attacks.size, bonafide.size, fp, fn)


def _require_both_classes(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    attacks = scores.scores(Label.Attack)
    bonafide = scores.scores(Label.BonaFide)
    if attacks.size == 0 or bonafide.size == 0:
        raise DataError("Both attack and bona fide samples are needed", p=attacks.size, n=bonafide.size)
    return attacks, bonafide


def roc(scores: ScoreSet) -> List[RocPoint]:
    """
    One operating point per distinct score plus the -inf and +inf sentinels,
    ordered by increasing threshold (APCER rises, BPCER falls)
    """
    attacks, bonafide = _require_both_classes(scores)
    thresholds = np.concatenate([[-math.inf], np.unique(np.concatenate([attacks, bonafide])), [math.inf]])
    attacks.sort()
    bonafide.sort()
    missed = np.searchsorted(attacks, thresholds, side="left")
    accepted = bonafide.size - np.searchsorted(bonafide, thresholds, side="left")
    return [
        RocPoint(float(thr), int(fn) / attacks.size, int(fp) / bonafide.size)
        for thr, fn, fp in zip(thresholds, missed, accepted)
    ]


def bpcer_at_apcer(points: Sequence[RocPoint], target: float = BPCER20_APCER) -> float:
    """Lowest BPCER among operating points with APCER ≤ target; no interpolation"""
    return min((p.bpcer for p in points if p.apcer <= target + RATE_SLACK), default=1.0)


def tpr_at_bpcer(points: Sequence[RocPoint], target: float) -> float:
    """Highest attack detection rate (1 - APCER) among points with BPCER ≤ target"""
    return max((1.0 - p.apcer for p in points if p.bpcer <= target + RATE_SLACK), default=0.0)


def auc(scores: ScoreSet) -> float:
    """
    Probability that a random attack outscores a random bona fide sample,
    ties counting one half (Mann-Whitney rank statistic)
    """
    attacks, bonafide = _require_both_classes(scores)
    ranks = rankdata(np.concatenate([attacks, bonafide]))
    rank_sum = float(np.sum(ranks[: attacks.size]))
    p, n = attacks.size, bonafide.size
    return (rank_sum - p * (p + 1) / 2) / (p * n)


def apcer_per_species(scores: ScoreSet, threshold: float = THRESHOLD) -> Dict[str, float]:
    """APCER of every attack species present"""
    missed: Dict[str, List[bool]] = {}
    for sample in scores:
        if sample.label is Label.Attack and sample.species is not None:
            missed.setdefault(sample.species.value, []).append(sample.score < threshold)
    return {species: sum(flags) / len(flags) for species, flags in sorted(missed.items())}


@dataclass(frozen=True)
class MetricsReport:
    """Everything measured on one evaluated fold"""

    apcer: Optional[float]
    bpcer: Optional[float]
    acer: Optional[float]
    bpcer20: Optional[float]
    auc: Optional[float]
    threshold: float
    p: int
    n: int
    fp: int
    fn: int
    roc: List[RocPoint] = field(default_factory=list)
    apcer_per_species: Dict[str, float] = field(default_factory=dict)

    @property
    def max_apcer(self) -> Optional[float]:
        """APCER of the hardest species"""
        return max(self.apcer_per_species.values(), default=None)

    def metric(self, name: str) -> Optional[float]:
        """look a headline metric up by name"""
        value: Optional[float] = getattr(self, name)
        return value

    def to_json(self) -> Dict[str, Any]:
        """plain dict; infinite ROC thresholds become strings"""
        raw = asdict(self)
        raw["roc"] = [[_encode_threshold(p.threshold), p.apcer, p.bpcer] for p in self.roc]
        raw["max_apcer"] = self.max_apcer
        return raw

    @staticmethod
    def from_json(raw: Dict[str, Any]) -> MetricsReport:
        """inverse of `to_json`"""
        fields = {k: v for k, v in raw.items() if k not in ("roc", "max_apcer")}
        points = [RocPoint(float(t), a, b) for t, a, b in raw.get("roc", [])]
        return MetricsReport(**fields, roc=points)


def _encode_threshold(value: float) -> float | str:
    return str(value) if math.isinf(value) else value


def evaluate(scores: ScoreSet, threshold: float = THRESHOLD) -> MetricsReport:
    """Full metric suite; curve metrics are None when a class is missing"""
    point = point_metrics(scores, threshold)
    if point.p and point.n:
        points = roc(scores)
        bpcer20: Optional[float] = bpcer_at_apcer(points)
        area: Optional[float] = auc(scores)
    else:
        points, bpcer20, area = [], None, None
    return MetricsReport(
        apcer=point.apcer,
        bpcer=point.bpcer,
        acer=point.acer,
        bpcer20=bpcer20,
        auc=area,
        threshold=threshold,
        p=point.p,
        n=point.n,
        fp=point.fp,
        fn=point.fn,
        roc=points,
        apcer_per_species=apcer_per_species(scores, threshold),
    )


def write_roc_csv(path: str | os.PathLike[str], points: Sequence[RocPoint]) -> None:
    """threshold, apcer, bpcer rows"""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["threshold", "apcer", "bpcer"])
        for point in points:
            writer.writerow([repr(point.threshold), repr(point.apcer), repr(point.bpcer)])


# ---------------------------------------------------------------------------
# fold aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricStat:
    """population mean and std of one metric; `excluded` folds had it undefined"""

    mean: Optional[float]
    std: Optional[float]
    count: int
    excluded: int


@dataclass(frozen=True)
class FoldSummary:
    """mean/std per metric and the ROC averaged over folds"""

    stats: Dict[str, MetricStat]
    roc_apcer: List[float]
    roc_bpcer: List[float]

    def to_json(self) -> Dict[str, Any]:
        """plain dict, ready for json.dumps"""
        return asdict(self)


def _step_bpcer(points: Sequence[RocPoint], grid: np.ndarray) -> np.ndarray:
    apcers = np.array([p.apcer for p in points])
    bpcers = np.array([p.bpcer for p in points])
    # apcer rises and bpcer falls along the curve, so the last point within reach is the best one
    index = np.searchsorted(apcers, grid + RATE_SLACK, side="right") - 1
    return np.where(index >= 0, bpcers[np.clip(index, 0, None)], 1.0)


def aggregate_folds(reports: Sequence[MetricsReport]) -> FoldSummary:
    """Mean and population std of each metric over folds, plus the averaged ROC"""
    if not reports:
        raise DataError("No fold reports to aggregate")
    stats = {}
    for name in METRIC_NAMES:
        values = [v for r in reports if (v := r.metric(name)) is not None]
        excluded = len(reports) - len(values)
        if values:
            stats[name] = MetricStat(float(np.mean(values)), float(np.std(values)), len(values), excluded)
        else:
            stats[name] = MetricStat(None, None, 0, excluded)
    curves = [_step_bpcer(r.roc, ROC_GRID) for r in reports if r.roc]
    averaged = np.mean(curves, axis=0).tolist() if curves else []
    return FoldSummary(stats, ROC_GRID.tolist() if curves else [], averaged)
