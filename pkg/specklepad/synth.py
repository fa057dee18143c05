"""
Synthetic speckle captures standing in for a private LSCI collection.

A speckle frame is the squared magnitude of a spatially low-passed complex
Gaussian field. Frames evolve by an AR(1) recursion on that field: live
fingers (blood flow) decorrelate quickly, static overlays barely move.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import os
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from specklepad.data import Finger, Label, LsciSample, Manifest, ManifestEntry, SampleMeta, Species, save_sample
from specklepad.error import ConfigurationError

logger = logging.getLogger(__name__)

FINGERS = list(Finger)
CAPTURES_PER_FINGER = 3
SLOTS_PER_SUBJECT = len(FINGERS) * CAPTURES_PER_FINGER

# attack counts of the reference collection, 218 in total
DEFAULT_ATTACK_COUNTS: Dict[Species, int] = {
    Species.ConductivePaper: 11,
    Species.ConductiveSilicone: 62,
    Species.Transparency: 26,
    Species.SiliconeI: 79,
    Species.SiliconeII: 13,
    Species.DragonSkin: 27,
}
DEFAULT_BONAFIDE = 400
DEFAULT_SUBJECTS = 40
DEFAULT_GEOMETRY = (64, 64, 100)

SampleClass = Tuple[Label, Optional[Species]]


@dataclass(frozen=True)
class SpeckleParams:
    """Physics knobs of the generator"""

    correlation_length: float = 1.5
    mean_intensity: float = 2000.0
    rho_bonafide: float = 0.85
    rho_attack: float = 0.999
    read_noise: float = 10.0
    dark_level: float = 100.0
    dark_amplitude: float = 5.0
    # optional per-species override of rho_attack
    species_rho: Mapping[Species, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("correlation_length", "mean_intensity", "dark_level"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive", value=getattr(self, name))
        for name in ("read_noise", "dark_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must not be negative", value=getattr(self, name))
        for rho in [self.rho_bonafide, self.rho_attack, *self.species_rho.values()]:
            if not 0 < rho <= 1:
                raise ConfigurationError(f"Frame correlation must lie in (0, 1], got {rho}")

    def rho_for(self, label: Label, species: Optional[Species]) -> float:
        """per-frame correlation of the underlying field"""
        if label is Label.BonaFide:
            return self.rho_bonafide
        if species is not None and species in self.species_rho:
            return self.species_rho[species]
        return self.rho_attack


def _lowpass(field_: np.ndarray, sigma: float) -> np.ndarray:
    # periodic borders keep the field statistics stationary up to the frame edge
    return gaussian_filter(field_.real, sigma, mode="wrap") + 1j * gaussian_filter(field_.imag, sigma, mode="wrap")


def _complex_normal(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def synth_sample(
    label: Label,
    species: Optional[Species],
    geometry: Tuple[int, int, int],
    physics: SpeckleParams = SpeckleParams(),
    seed: int = 0,
    meta: Optional[SampleMeta] = None,
) -> LsciSample:
    """Generate one H×W×T capture of the given class"""
    h, w, t = geometry
    if min(h, w, t) < 1:
        raise ConfigurationError(f"Geometry must be positive, got {geometry}")
    if (species is not None) != (label is Label.Attack):
        raise ConfigurationError("Attacks need a species; bona fide samples must not have one")
    rho = physics.rho_for(label, species)
    innovation = math.sqrt(max(0.0, 1.0 - rho * rho))
    rng = np.random.default_rng(seed)

    intensity = np.empty((t, h, w), dtype=np.float64)
    z = _complex_normal(rng, (h, w))
    for frame in range(t):
        if frame > 0:
            z = rho * z + innovation * _complex_normal(rng, (h, w))
        intensity[frame] = np.abs(_lowpass(z, physics.correlation_length)) ** 2
    intensity *= physics.mean_intensity / max(float(intensity.mean()), np.finfo(np.float64).tiny)

    texture = gaussian_filter(rng.standard_normal((h, w)), 2.0, mode="wrap")
    texture /= max(float(texture.std()), 1e-12)
    dark = (physics.dark_level + physics.dark_amplitude * texture).astype(np.float32)

    noise = physics.read_noise * rng.standard_normal((t, h, w))
    counts = np.clip(np.rint(intensity + dark[None, :, :] + noise), 0, np.iinfo(np.uint16).max)
    cube = np.ascontiguousarray(np.moveaxis(counts, 0, 2)).astype(np.uint16)
    return LsciSample(cube, dark, meta)


def default_counts(bonafide: int = DEFAULT_BONAFIDE) -> Dict[SampleClass, int]:
    """the reference attack split plus a desk-scale bona fide count"""
    counts: Dict[SampleClass, int] = {(Label.BonaFide, None): bonafide}
    counts.update({(Label.Attack, species): n for species, n in DEFAULT_ATTACK_COUNTS.items()})
    return counts


def plan_slots(counts: Mapping[SampleClass, int], subjects: int) -> List[Tuple[SampleClass, str, Finger, int]]:
    """
    Deal samples to subjects round-robin. Each subject has six fingers and
    at most three captures per finger.
    """
    if subjects < 1:
        raise ConfigurationError("At least one subject is required")
    if any(n < 0 for n in counts.values()):
        raise ConfigurationError("Sample counts must not be negative")
    total = sum(counts.values())
    capacity = subjects * SLOTS_PER_SUBJECT
    if total > capacity:
        raise ConfigurationError(
            f"{total} samples do not fit {subjects} subjects (capacity {capacity})", total=total, capacity=capacity
        )
    classes = [sample_class for sample_class, n in counts.items() for _ in range(n)]
    plan = []
    for index, sample_class in enumerate(classes):
        slot = index // subjects
        plan.append((sample_class, f"subj{index % subjects:03d}", FINGERS[slot % len(FINGERS)], slot // len(FINGERS)))
    return plan


def make_synth_dataset(
    out_dir: str | os.PathLike[str],
    counts: Optional[Mapping[SampleClass, int]] = None,
    subjects: int = DEFAULT_SUBJECTS,
    seed: int = 0,
    geometry: Tuple[int, int, int] = DEFAULT_GEOMETRY,
    physics: SpeckleParams = SpeckleParams(),
    workers: int = 1,
) -> Manifest:
    """Write a synthetic dataset (sample files + manifest.json) and return its manifest"""
    counts = default_counts() if counts is None else counts
    plan = plan_slots(counts, subjects)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(len(plan))

    def generate(index: int) -> ManifestEntry:
        (label, species), subject_id, finger, capture_index = plan[index]
        meta = SampleMeta(f"s{index:05d}", subject_id, finger, label, species, capture_index)
        sample = synth_sample(label, species, geometry, physics, int(seeds[index].generate_state(1)[0]), meta)
        filename = f"{meta.sample_id}.lsc"
        save_sample(sample, out / filename)
        if (index + 1) % 100 == 0:
            logger.info("generated %d/%d samples", index + 1, len(plan))
        return ManifestEntry(filename, meta)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(pool.map(generate, range(len(plan))))

    manifest = Manifest(entries, root=out)
    manifest.save(out / "manifest.json")
    logger.info("wrote %d samples to %s: %s", len(entries), out, manifest.class_counts())
    return manifest
