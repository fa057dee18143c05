"""
Partition planners: subject-disjoint k-fold and leave-one-attack-out
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
import logging
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from specklepad.data import Label, Manifest, Species
from specklepad.error import ConfigurationError, DataError

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 3
DEFAULT_VAL_FRAC = 0.2
# bona fide train/test/val fractions of the reference leave-one-attack-out split
DEFAULT_BONAFIDE_FRACS = (0.929, 0.021, 0.050)
DEFAULT_ATTACK_VAL_FRAC = 0.15


class Strategy(Enum):
    """how the folds were drawn"""

    ThreeFold = "ThreeFold"
    LOAO = "LOAO"

    @staticmethod
    def parse(text: str) -> Strategy:
        """accepts the enum value or the short CLI names kfold / loao"""
        match text.strip().lower():
            case "threefold" | "kfold" | "3fold":
                return Strategy.ThreeFold
            case "loao":
                return Strategy.LOAO
            case _:
                raise ConfigurationError(f'Unknown partition strategy "{text}"', choices=["kfold", "loao"])


@dataclass(frozen=True)
class Split:
    """train/val/test sample ids of one fold"""

    train: FrozenSet[str]
    val: FrozenSet[str]
    test: FrozenSet[str]
    held_out_species: Optional[Species] = None

    def to_json(self) -> Dict[str, Any]:
        """sorted id lists"""
        return {
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
            "held_out_species": self.held_out_species.value if self.held_out_species is not None else None,
        }

    @staticmethod
    def from_json(raw: Dict[str, Any]) -> Split:
        """inverse of `to_json`"""
        held_out = raw.get("held_out_species")
        return Split(
            frozenset(raw["train"]),
            frozenset(raw["val"]),
            frozenset(raw["test"]),
            Species(held_out) if held_out is not None else None,
        )


@dataclass(frozen=True)
class FoldPlan:
    """All folds of one partitioning strategy"""

    folds: List[Split]
    strategy: Strategy
    seed: int

    def to_json(self) -> Dict[str, Any]:
        """plain dict, ready for json.dumps"""
        return {"strategy": self.strategy.value, "seed": self.seed, "folds": [f.to_json() for f in self.folds]}

    @staticmethod
    def from_json(raw: Dict[str, Any]) -> FoldPlan:
        """inverse of `to_json`"""
        return FoldPlan([Split.from_json(f) for f in raw["folds"]], Strategy(raw["strategy"]), int(raw["seed"]))

    def violations(self, manifest: Manifest) -> List[str]:
        """Every broken partition invariant, as readable strings"""
        problems = []
        everything = set(manifest.sample_ids)
        subject_of = {e.meta.sample_id: e.meta.subject_id for e in manifest}
        species_of = {e.meta.sample_id: e.meta.species for e in manifest}
        for index, fold in enumerate(self.folds):
            if fold.train & fold.val or fold.train & fold.test or fold.val & fold.test:
                problems.append(f"fold {index}: train/val/test overlap")
            if fold.train | fold.val | fold.test != everything:
                problems.append(f"fold {index}: sets do not cover the manifest")
            if self.strategy is Strategy.ThreeFold:
                fit = {subject_of[s] for s in fold.train | fold.val if s in subject_of}
                test = {subject_of[s] for s in fold.test if s in subject_of}
                if fit & test:
                    problems.append(f"fold {index}: subjects {sorted(fit & test)} span fit and test")
                train = {subject_of[s] for s in fold.train if s in subject_of}
                val = {subject_of[s] for s in fold.val if s in subject_of}
                if train & val:
                    problems.append(f"fold {index}: subjects {sorted(train & val)} span train and val")
            else:
                leaked = [s for s in fold.train | fold.val if species_of.get(s) is fold.held_out_species]
                if fold.held_out_species is None or leaked:
                    problems.append(f"fold {index}: held-out species leaks into train/val ({len(leaked)} samples)")
        return problems

    def check(self, manifest: Manifest) -> None:
        """raise if any invariant is broken"""
        if problems := self.violations(manifest):
            raise DataError("Invalid fold plan: " + "; ".join(problems))


def _subject_table(manifest: Manifest) -> Dict[str, Counter[str]]:
    table: Dict[str, Counter[str]] = defaultdict(Counter)
    for entry in manifest:
        table[entry.meta.subject_id][entry.meta.class_name] += 1
    return dict(table)


def _samples_of(manifest: Manifest, subjects: Sequence[str]) -> FrozenSet[str]:
    wanted = set(subjects)
    return frozenset(e.meta.sample_id for e in manifest if e.meta.subject_id in wanted)


def assign_bins(table: Dict[str, Counter[str]], k: int, rng: np.random.Generator) -> List[List[str]]:
    """
    Greedy class-balanced assignment of subjects to k bins. Subjects are
    shuffled, then visited largest first; each goes to the bin currently
    holding the smallest share of the classes it brings.
    """
    totals: Counter[str] = Counter()
    for counts in table.values():
        totals.update(counts)
    order = [str(s) for s in rng.permutation(sorted(table))]
    order.sort(key=lambda s: -sum(table[s].values()))

    bins: List[List[str]] = [[] for _ in range(k)]
    loads: List[Counter[str]] = [Counter() for _ in range(k)]
    grand_total = sum(totals.values())

    def cost(index: int, counts: Counter[str]) -> Tuple[float, float, int]:
        share = sum(n * loads[index][c] / totals[c] for c, n in counts.items())
        size = sum(loads[index].values()) / grand_total
        return share, size, index

    for subject in order:
        best = min(range(k), key=lambda index: cost(index, table[subject]))
        bins[best].append(subject)
        loads[best].update(table[subject])
    return bins


def _carve_validation(
    table: Dict[str, Counter[str]], subjects: List[str], val_frac: float, rng: np.random.Generator
) -> Tuple[List[str], List[str]]:
    """Move whole subjects into validation until each class holds roughly val_frac of its samples"""
    totals: Counter[str] = Counter()
    for subject in subjects:
        totals.update(table[subject])
    target = {c: val_frac * n for c, n in totals.items()}
    held: Counter[str] = Counter()
    train, val = [], []
    for subject in [str(s) for s in rng.permutation(sorted(subjects))]:
        counts = table[subject]
        wanted = sum(min(n, max(0.0, target[c] - held[c])) for c, n in counts.items())
        if wanted > 0 and 2 * wanted >= sum(counts.values()):
            val.append(subject)
            held.update(counts)
        else:
            train.append(subject)
    return train, val


def kfold_plan(
    manifest: Manifest, k: int = DEFAULT_FOLDS, val_frac: float = DEFAULT_VAL_FRAC, seed: int = 0
) -> FoldPlan:
    """Subject-disjoint k-fold plan with a subject-disjoint validation carve-out"""
    if k < 2:
        raise ConfigurationError(f"Need at least two folds, got {k}")
    if not 0 <= val_frac < 1:
        raise ConfigurationError(f"Validation fraction must lie in [0, 1), got {val_frac}")
    table = _subject_table(manifest)
    if len(table) < k:
        raise ConfigurationError(f"{len(table)} subjects cannot fill {k} folds", subjects=len(table), folds=k)
    for class_name in sorted({c for counts in table.values() for c in counts}):
        owners = sum(1 for counts in table.values() if class_name in counts)
        if owners < k:
            logger.warning("class %s has only %d subjects; some test sets will lack it", class_name, owners)

    rng = np.random.default_rng(seed)
    bins = assign_bins(table, k, rng)
    folds = []
    for index, test_subjects in enumerate(bins):
        rest = [s for other, subjects in enumerate(bins) if other != index for s in subjects]
        train_subjects, val_subjects = _carve_validation(table, rest, val_frac, rng)
        fold = Split(
            _samples_of(manifest, train_subjects),
            _samples_of(manifest, val_subjects),
            _samples_of(manifest, test_subjects),
        )
        logger.info(
            "fold %d: %d train / %d val / %d test samples", index, len(fold.train), len(fold.val), len(fold.test)
        )
        folds.append(fold)
    return FoldPlan(folds, Strategy.ThreeFold, seed)


def _split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    counts = [int(round(f * n)) for f in fractions[1:]]
    return [n - sum(counts)] + counts


def loao_plan(
    manifest: Manifest,
    bonafide_fracs: Tuple[float, float, float] = DEFAULT_BONAFIDE_FRACS,
    seed: int = 0,
    attack_val_frac: float = DEFAULT_ATTACK_VAL_FRAC,
) -> FoldPlan:
    """
    One fold per attack species: the held-out species goes entirely to test.
    Bona fide samples are split once by (train, test, val) fractions and the
    same split is reused by every fold; the other species keep a fixed
    train/val split across folds.
    """
    if len(bonafide_fracs) != 3 or any(f < 0 for f in bonafide_fracs) or abs(sum(bonafide_fracs) - 1) > 1e-6:
        raise ConfigurationError(
            f"Bona fide fractions must be three non-negative values summing to 1: {bonafide_fracs}"
        )
    if not 0 <= attack_val_frac < 1:
        raise ConfigurationError(f"Attack validation fraction must lie in [0, 1), got {attack_val_frac}")
    by_class: Dict[Optional[Species], List[str]] = defaultdict(list)
    for entry in manifest:
        by_class[entry.meta.species if entry.meta.label is Label.Attack else None].append(entry.meta.sample_id)
    species = [s for s in Species if s in by_class]
    if not species:
        raise ConfigurationError("Leave-one-attack-out needs at least one attack species")
    if len(species) == 1:
        raise ConfigurationError(
            f"Only {species[0].value} is present; holding it out leaves no attacks to train on"
        )

    rng = np.random.default_rng(seed)
    bonafide = [str(s) for s in rng.permutation(sorted(by_class[None]))]
    train_n, test_n, _ = _split_counts(len(bonafide), (bonafide_fracs[0], bonafide_fracs[1], bonafide_fracs[2]))
    bf_train = frozenset(bonafide[:train_n])
    bf_test = frozenset(bonafide[train_n : train_n + test_n])
    bf_val = frozenset(bonafide[train_n + test_n :])

    attack_split: Dict[Species, Tuple[FrozenSet[str], FrozenSet[str]]] = {}
    for kind in species:
        ids = [str(s) for s in rng.permutation(sorted(by_class[kind]))]
        val_n = int(round(attack_val_frac * len(ids)))
        if attack_val_frac > 0 and len(ids) >= 2:
            val_n = max(val_n, 1)
        attack_split[kind] = (frozenset(ids[val_n:]), frozenset(ids[:val_n]))

    folds = []
    for held_out in species:
        train = set(bf_train)
        val = set(bf_val)
        for kind in species:
            if kind is not held_out:
                train |= attack_split[kind][0]
                val |= attack_split[kind][1]
        test = bf_test | frozenset(by_class[held_out])
        folds.append(Split(frozenset(train), frozenset(val), test, held_out))
        logger.info("LOAO fold holding out %s: %d test attacks", held_out.value, len(by_class[held_out]))
    return FoldPlan(folds, Strategy.LOAO, seed)
