"""
Cut preprocessed clips into patches, lay the patches out the way each
network family reads them, and fold patch scores back into a sample decision
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from specklepad.architectures import ArchKind
from specklepad.data import Label
from specklepad.error import ConfigurationError, DataError
from specklepad.tensor import Tensor

DEFAULT_ROI = 32
FULL_FRAME = 64
THRESHOLD = 0.5


@dataclass(frozen=True)
class PatchSpec:
    """
    Spatial size, temporal depth and stride of the patches. `stride`
    defaults to the patch width (non-overlapping); `train_stride` may be
    smaller to augment the training set with overlapping patches.
    """

    h: int
    w: int
    t: int
    stride: Optional[int] = None
    roi: int = DEFAULT_ROI
    train_stride: Optional[int] = None
    offset: int = 0

    def __post_init__(self) -> None:
        if min(self.h, self.w, self.t) < 1:
            raise ConfigurationError(f"Patch size must be positive, got {self.h}x{self.w}x{self.t}")
        if not self.full_frame and (self.h > self.roi or self.w > self.roi):
            raise ConfigurationError(f"Patch {self.h}x{self.w} does not fit the {self.roi}x{self.roi} ROI")
        for stride in (self.stride, self.train_stride):
            if stride is not None and stride < 1:
                raise ConfigurationError(f"Stride must be positive, got {stride}")
        if self.offset < 0:
            raise ConfigurationError("Clip offset must not be negative")

    @property
    def full_frame(self) -> bool:
        """the 64×64 sweep value bypasses the ROI and uses the whole frame"""
        return self.h == FULL_FRAME and self.w == FULL_FRAME

    @property
    def eval_stride(self) -> int:
        """stride used to score samples"""
        return self.stride if self.stride is not None else self.h

    @property
    def fit_stride(self) -> int:
        """stride used to build training patches"""
        return self.train_stride if self.train_stride is not None else self.eval_stride

    def patch_count(self, roi: Optional[int] = None, stride: Optional[int] = None) -> int:
        """(floor((roi - h) / s) + 1)·(floor((roi - w) / s) + 1)"""
        side = roi if roi is not None else (FULL_FRAME if self.full_frame else self.roi)
        s = stride if stride is not None else self.eval_stride
        return ((side - self.h) // s + 1) * ((side - self.w) // s + 1)


Provenance = Tuple[str, int, int]


@dataclass(frozen=True)
class PatchBatch:
    """N×t×h×w patches and where each came from"""

    patches: Tensor
    provenance: List[Provenance]

    def __post_init__(self) -> None:
        if self.patches.shape[0] != len(self.provenance):
            raise DataError("Patch count and provenance length differ")

    def __len__(self) -> int:
        return len(self.provenance)

    def take(self, indices: Sequence[int]) -> PatchBatch:
        """sub-batch in the given order"""
        index = np.asarray(indices, dtype=np.intp)
        return PatchBatch(self.patches[index], [self.provenance[i] for i in index])

    @staticmethod
    def concat(batches: Sequence[PatchBatch]) -> PatchBatch:
        """stack several batches"""
        if not batches:
            raise DataError("Cannot concatenate an empty list of patch batches")
        return PatchBatch(
            np.concatenate([b.patches for b in batches]), [p for b in batches for p in b.provenance]
        )


def extract_roi(clip: Tensor, roi: int = DEFAULT_ROI) -> Tensor:
    """Central roi×roi crop; an odd margin leaves the extra pixel at the bottom/right"""
    _, height, width = clip.shape
    if roi < 1 or roi > min(height, width):
        raise ConfigurationError(f"ROI {roi} does not fit a {height}x{width} frame")
    top = (height - roi) // 2
    left = (width - roi) // 2
    return clip[:, top : top + roi, left : left + roi]


def extract_patches(clip: Tensor, spec: PatchSpec, sample_id: str = "", stride: Optional[int] = None) -> PatchBatch:
    """All fully contained windows at the given stride, in raster order"""
    step = stride if stride is not None else spec.eval_stride
    depth, height, width = clip.shape
    if spec.h > height or spec.w > width:
        raise ConfigurationError(f"Patch {spec.h}x{spec.w} does not fit a {height}x{width} region")
    if spec.t != depth:
        raise ConfigurationError(f"Clip has {depth} frames but patches need {spec.t}")
    patches = []
    provenance = []
    for y in range(0, height - spec.h + 1, step):
        for x in range(0, width - spec.w + 1, step):
            patches.append(clip[:, y : y + spec.h, x : x + spec.w])
            provenance.append((sample_id, y, x))
    return PatchBatch(np.ascontiguousarray(np.stack(patches)), provenance)


def sample_patches(clip: Tensor, spec: PatchSpec, sample_id: str = "", training: bool = False) -> PatchBatch:
    """ROI crop (unless full-frame) followed by patch extraction"""
    region = clip if spec.full_frame else extract_roi(clip, spec.roi)
    return extract_patches(region, spec, sample_id, spec.fit_stride if training else spec.eval_stride)


def to_2d_view(batch: PatchBatch) -> Tensor:
    """N×t×h×w: time already sits on the channel axis"""
    return batch.patches


def to_3d_view(batch: PatchBatch) -> Tensor:
    """N×1×t×h×w: one input channel over a t×h×w volume"""
    return batch.patches[:, None]


def to_sequence(batch: PatchBatch) -> List[Tensor]:
    """t vectors of N×(h·w), each frame flattened row-major"""
    n, t, h, w = batch.patches.shape
    return [batch.patches[:, i].reshape(n, h * w) for i in range(t)]


def patch_view(kind: ArchKind, batch: PatchBatch) -> Tensor:
    """The layout a network of `kind` consumes, as a single array"""
    match kind:
        case ArchKind.Conv3:
            return to_3d_view(batch)
        case ArchKind.Lstm:
            n, t, h, w = batch.patches.shape
            return np.ascontiguousarray(batch.patches.reshape(n, t, h * w).transpose(1, 0, 2))
        case _:
            return to_2d_view(batch)


def aggregate(scores: Sequence[float], threshold: float = THRESHOLD) -> Tuple[float, Label]:
    """Mean patch score; a mean at or above the threshold is an attack"""
    if len(scores) == 0:
        raise DataError("Cannot aggregate an empty list of patch scores")
    values = np.asarray(scores, dtype=np.float64)
    if np.any((values < 0) | (values > 1)) or not np.all(np.isfinite(values)):
        raise DataError("Patch scores must lie in [0, 1]")
    # exact summation keeps the mean independent of patch order
    sample_score = math.fsum(values.tolist()) / len(values)
    return sample_score, Label.Attack if sample_score >= threshold else Label.BonaFide
