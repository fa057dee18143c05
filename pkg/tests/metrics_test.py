# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring

import csv
from itertools import product
import json
import math
from pathlib import Path
from tempfile import TemporaryDirectory
from typing import List, Optional, Sequence, Tuple
from unittest import TestCase

import numpy as np

from specklepad.data import Label, Species
from specklepad.error import DataError
from specklepad.metrics import (
    ROC_GRID,
    MetricsReport,
    ScoredSample,
    ScoreSet,
    aggregate_folds,
    apcer_per_species,
    auc,
    bpcer_at_apcer,
    evaluate,
    point_metrics,
    roc,
    tpr_at_bpcer,
    write_roc_csv,
)


def score_set(attacks: Sequence[float], bonafide: Sequence[float]) -> ScoreSet:
    samples = [ScoredSample(f"a{i:03}", Label.Attack, s, Species.Transparency) for i, s in enumerate(attacks)]
    samples += [ScoredSample(f"b{i:03}", Label.BonaFide, s) for i, s in enumerate(bonafide)]
    return ScoreSet(samples)


def sweep(attacks: Sequence[float], bonafide: Sequence[float]) -> List[Tuple[float, float]]:
    """(apcer, bpcer) at every threshold worth trying: below, at, between and above all scores"""
    values = sorted(set(attacks) | set(bonafide))
    candidates = [-math.inf, math.inf, *values]
    candidates += [(lo + hi) / 2 for lo, hi in zip(values, values[1:])]
    points = []
    for threshold in candidates:
        apcer = sum(s < threshold for s in attacks) / len(attacks)
        bpcer = sum(s >= threshold for s in bonafide) / len(bonafide)
        points.append((apcer, bpcer))
    return points


def pair_auc(attacks: Sequence[float], bonafide: Sequence[float]) -> float:
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in product(attacks, bonafide))
    return wins / (len(attacks) * len(bonafide))


def report(acer: Optional[float]) -> MetricsReport:
    return MetricsReport(
        apcer=acer, bpcer=acer, acer=acer, bpcer20=None, auc=None, threshold=0.5, p=1, n=1, fp=0, fn=0
    )


class PointMetrics(TestCase):
    def test_apcer(self) -> None:
        metrics = point_metrics(score_set([0.1, 0.2] + [0.9] * 8, [0.1] * 6))
        self.assertEqual((metrics.p, metrics.fn), (10, 2))
        self.assertEqual(metrics.apcer, 0.2)

    def test_bpcer(self) -> None:
        metrics = point_metrics(score_set([0.9], [0.1, 0.2, 0.3, 0.4, 0.45, 0.49]))
        self.assertEqual(metrics.bpcer, 0.0)
        self.assertEqual(metrics.fp, 0)

    def test_acer(self) -> None:
        metrics = point_metrics(score_set([0.1, 0.9, 0.9, 0.9], [0.1, 0.2]))
        self.assertEqual((metrics.apcer, metrics.bpcer, metrics.acer), (0.25, 0.0, 0.125))

    def test_threshold_counts_as_attack(self) -> None:
        metrics = point_metrics(score_set([0.5], [0.5]))
        self.assertEqual((metrics.fn, metrics.fp), (0, 1))

    def test_missing_class_gives_null_rates(self) -> None:
        metrics = point_metrics(score_set([], [0.1, 0.7]))
        self.assertIsNone(metrics.apcer)
        self.assertIsNone(metrics.acer)
        self.assertEqual(metrics.bpcer, 0.5)

    def test_matches_raw_counts(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(20):
            attacks, bonafide = rng.random(7).tolist(), rng.random(5).tolist()
            metrics = point_metrics(score_set(attacks, bonafide))
            self.assertEqual(metrics.fn, sum(s < 0.5 for s in attacks))
            self.assertEqual(metrics.fp, sum(s >= 0.5 for s in bonafide))
            self.assertEqual(metrics.acer, 0.5 * (metrics.apcer + metrics.bpcer))

    def test_empty(self) -> None:
        with self.assertRaises(DataError):
            point_metrics(ScoreSet([]))

    def test_scores_must_be_probabilities(self) -> None:
        with self.assertRaises(DataError):
            score_set([1.2], [0.1])


class Curves(TestCase):
    def test_sentinels(self) -> None:
        points = roc(score_set([0.9, 0.8], [0.2, 0.1]))
        self.assertEqual((points[0].threshold, points[0].apcer, points[0].bpcer), (-math.inf, 0.0, 1.0))
        self.assertEqual((points[-1].threshold, points[-1].apcer, points[-1].bpcer), (math.inf, 1.0, 0.0))
        self.assertEqual(len(points), 6)

    def test_perfect_separation(self) -> None:
        scores = score_set([0.9, 0.8], [0.2, 0.1])
        self.assertIn((0.0, 0.0), [(p.apcer, p.bpcer) for p in roc(scores)])
        self.assertEqual(bpcer_at_apcer(roc(scores)), 0.0)
        self.assertEqual(auc(scores), 1.0)

    def test_staircase(self) -> None:
        points = roc(score_set(np.random.default_rng(2).random(6).tolist(), [0.3, 0.6, 0.6]))
        self.assertEqual([p.threshold for p in points], sorted(p.threshold for p in points))
        for earlier, later in zip(points, points[1:]):
            self.assertLessEqual(earlier.apcer, later.apcer)
            self.assertGreaterEqual(earlier.bpcer, later.bpcer)

    def test_bpcer20_without_interpolation(self) -> None:
        scores = score_set([0.9, 0.8, 0.7, 0.1], [0.6, 0.4, 0.3, 0.2, 0.15, 0.05])
        self.assertAlmostEqual(bpcer_at_apcer(roc(scores)), 5 / 6)

    def test_single_attack(self) -> None:
        points = roc(score_set([0.3], [0.1, 0.5]))
        self.assertTrue({p.apcer for p in points} <= {0.0, 1.0})
        self.assertEqual(bpcer_at_apcer(points), 0.5)

    def test_tpr_at_bpcer(self) -> None:
        points = roc(score_set([0.9, 0.6, 0.3], [0.7, 0.2]))
        self.assertAlmostEqual(tpr_at_bpcer(points, 0.0), 1 / 3)
        self.assertEqual(tpr_at_bpcer(points, 0.5), 1.0)

    def test_auc(self) -> None:
        self.assertEqual(auc(score_set([0.9, 0.4], [0.5, 0.1])), 0.75)
        self.assertEqual(auc(score_set([0.3, 0.3], [0.3, 0.3, 0.3])), 0.5)

    def test_auc_ignores_monotone_transforms(self) -> None:
        rng = np.random.default_rng(3)
        attacks, bonafide = rng.random(9), rng.random(7)
        baseline = auc(score_set(attacks.tolist(), bonafide.tolist()))
        for transform in (np.sqrt, lambda v: v**3, lambda v: 0.5 * v + 0.25):
            self.assertAlmostEqual(auc(score_set(transform(attacks).tolist(), transform(bonafide).tolist())), baseline)

    def test_one_class(self) -> None:
        with self.assertRaises(DataError):
            roc(score_set([0.1], []))
        with self.assertRaises(DataError):
            auc(score_set([], [0.1]))

    def test_brute_force_agreement(self) -> None:
        rng = np.random.default_rng(4)
        for trial in range(1000):
            p = int(rng.integers(1, 11))
            n = int(rng.integers(1, 13 - p))
            # coarse grid so ties occur
            attacks = (rng.integers(0, 8, size=p) / 7).tolist()
            bonafide = (rng.integers(0, 8, size=n) / 7).tolist()
            scores = score_set(attacks, bonafide)
            with self.subTest(trial=trial):
                oracle = sweep(attacks, bonafide)
                self.assertEqual({(pt.apcer, pt.bpcer) for pt in roc(scores)}, set(oracle))
                self.assertEqual(
                    bpcer_at_apcer(roc(scores)), min((b for a, b in oracle if a <= 0.05), default=1.0)
                )
                self.assertAlmostEqual(auc(scores), pair_auc(attacks, bonafide))
                at_half = point_metrics(scores)
                self.assertEqual(at_half.apcer, sum(a < 0.5 for a in attacks) / p)
                self.assertEqual(at_half.bpcer, sum(b >= 0.5 for b in bonafide) / n)
                self.assertEqual(at_half.acer, (at_half.apcer + at_half.bpcer) / 2)


class Reports(TestCase):
    def test_full_suite(self) -> None:
        scores = ScoreSet(
            [
                ScoredSample("a", Label.Attack, 0.9, Species.DragonSkin),
                ScoredSample("b", Label.Attack, 0.2, Species.DragonSkin),
                ScoredSample("c", Label.Attack, 0.8, Species.SiliconeI),
                ScoredSample("d", Label.BonaFide, 0.1),
            ]
        )
        result = evaluate(scores)
        self.assertEqual(result.apcer_per_species, {"DragonSkin": 0.5, "SiliconeI": 0.0})
        self.assertEqual(result.max_apcer, 0.5)
        self.assertEqual(result.auc, 1.0)
        self.assertEqual(apcer_per_species(scores, threshold=0.1), {"DragonSkin": 0.0, "SiliconeI": 0.0})

    def test_curve_metrics_need_both_classes(self) -> None:
        result = evaluate(score_set([0.7, 0.2], []))
        self.assertEqual(result.apcer, 0.5)
        self.assertIsNone(result.auc)
        self.assertIsNone(result.bpcer20)
        self.assertEqual(result.roc, [])

    def test_json(self) -> None:
        result = evaluate(score_set([0.9, 0.3], [0.2, 0.6]))
        raw = json.loads(json.dumps(result.to_json()))
        self.assertEqual(raw["roc"][0][0], "-inf")
        self.assertEqual(MetricsReport.from_json(raw), result)

    def test_score_set_json(self) -> None:
        scores = score_set([0.9], [0.2])
        self.assertEqual(ScoreSet.from_json(json.loads(json.dumps(scores.to_json()))), scores)

    def test_roc_csv(self) -> None:
        points = roc(score_set([0.9], [0.2]))
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "roc.csv"
            write_roc_csv(path, points)
            with open(path, encoding="utf-8", newline="") as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ["threshold", "apcer", "bpcer"])
        self.assertEqual(len(rows), len(points) + 1)
        self.assertEqual(float(rows[1][0]), -math.inf)


class FoldAggregation(TestCase):
    def test_mean_and_population_std(self) -> None:
        stat = aggregate_folds([report(0.04), report(0.06)]).stats["acer"]
        self.assertAlmostEqual(stat.mean, 0.05)
        self.assertAlmostEqual(stat.std, 0.01)

    def test_single_fold(self) -> None:
        self.assertEqual(aggregate_folds([report(0.1)]).stats["acer"].std, 0.0)

    def test_null_values_are_excluded(self) -> None:
        stat = aggregate_folds([report(0.1), report(None)]).stats["acer"]
        self.assertEqual((stat.mean, stat.count, stat.excluded), (0.1, 1, 1))
        auc_stat = aggregate_folds([report(0.1)]).stats["auc"]
        self.assertIsNone(auc_stat.mean)

    def test_averaged_roc(self) -> None:
        perfect = evaluate(score_set([0.9], [0.1]))
        summary = aggregate_folds([perfect, perfect])
        self.assertEqual(len(summary.roc_bpcer), len(ROC_GRID))
        self.assertEqual(summary.roc_bpcer[0], 0.0)
        self.assertEqual(summary.roc_apcer[-1], 1.0)

    def test_no_reports(self) -> None:
        with self.assertRaises(DataError):
            aggregate_folds([])
