"""
LSCI captures: the in-memory data model, the on-disk sample format, the
JSON manifest that ties files to subjects and labels, and preprocessing
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import json
import os
from pathlib import Path
import struct
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import numpy.typing as npt

from specklepad.error import ConfigurationError, DataError, FormatError, TruncatedSampleError
from specklepad.tensor import DTYPE, Tensor

MAGIC = b"LSC1"
FORMAT_VERSION = 1
# magic, version, H, W, T, then zero padding up to 44 bytes
HEADER = struct.Struct("<4sHIII26x")
HEADER_SIZE = HEADER.size


class Label(Enum):
    """bona fide presentations are the negative class, attacks the positive"""

    BonaFide = "BonaFide"
    Attack = "Attack"

    @property
    def target(self) -> int:
        """training target: 1 for attacks"""
        return 1 if self is Label.Attack else 0


class Species(Enum):
    """The six overlay attack materials"""

    ConductivePaper = "ConductivePaper"
    ConductiveSilicone = "ConductiveSilicone"
    Transparency = "Transparency"
    SiliconeI = "SiliconeI"
    SiliconeII = "SiliconeII"
    DragonSkin = "DragonSkin"


class Finger(Enum):
    """the three middle fingers of each hand"""

    LeftIndex = "LeftIndex"
    LeftMiddle = "LeftMiddle"
    LeftRing = "LeftRing"
    RightIndex = "RightIndex"
    RightMiddle = "RightMiddle"
    RightRing = "RightRing"


@dataclass(frozen=True)
class SampleMeta:
    """Who, which finger, and what was presented"""

    sample_id: str
    subject_id: str
    finger: Finger
    label: Label
    species: Optional[Species]
    capture_index: int

    def __post_init__(self) -> None:
        if (self.species is not None) != (self.label is Label.Attack):
            raise DataError("A species is required for attacks and forbidden for bona fide", sample=self.sample_id)

    @property
    def class_name(self) -> str:
        """species name for attacks, "BonaFide" otherwise"""
        return self.species.value if self.species is not None else Label.BonaFide.value


@dataclass
class LsciSample:
    """
    One capture: an H×W×T unsigned 16-bit cube of illuminated frames and the
    H×W average of the frames taken without the laser
    """

    cube: npt.NDArray[np.uint16]
    dark_avg: npt.NDArray[np.float32]
    meta: Optional[SampleMeta] = None

    def __post_init__(self) -> None:
        if self.cube.ndim != 3 or min(self.cube.shape) < 1:
            raise DataError(f"Cube must be a non-empty H×W×T array, got shape {self.cube.shape}")
        if self.dark_avg.shape != self.cube.shape[:2]:
            raise DataError(f"Dark frame shape {self.dark_avg.shape} does not match cube {self.cube.shape[:2]}")
        self.cube = np.asarray(self.cube, dtype=np.uint16)
        self.dark_avg = np.asarray(self.dark_avg, dtype=np.float32)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """H, W, T"""
        h, w, t = self.cube.shape
        return h, w, t


def sample_file_size(h: int, w: int, t: int) -> int:
    """header + float32 dark frame + uint16 cube"""
    return HEADER_SIZE + h * w * 4 + h * w * t * 2


def encode_sample(sample: LsciSample) -> bytes:
    """Serialize to the LSC1 byte layout"""
    h, w, t = sample.shape
    header = HEADER.pack(MAGIC, FORMAT_VERSION, h, w, t)
    dark = sample.dark_avg.astype("<f4").tobytes()
    # frame-major on disk: frame 0 first, row-major within a frame
    frames = np.ascontiguousarray(np.moveaxis(sample.cube, 2, 0)).astype("<u2").tobytes()
    return header + dark + frames


def decode_sample(raw: bytes, meta: Optional[SampleMeta] = None, source: str = "<bytes>") -> LsciSample:
    """Parse the LSC1 byte layout"""
    if len(raw) < HEADER_SIZE:
        raise TruncatedSampleError("File is shorter than the sample header", path=source, size=len(raw))
    magic, version, h, w, t = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}", path=source)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}", path=source)
    if min(h, w, t) < 1:
        raise FormatError(f"Invalid cube shape {h}x{w}x{t}", path=source)
    expected = sample_file_size(h, w, t)
    if len(raw) < expected:
        raise TruncatedSampleError(
            f"Expected {expected} bytes, found {len(raw)}", path=source, shape=(h, w, t)
        )
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after the cube", path=source)
    dark = np.frombuffer(raw, dtype="<f4", count=h * w, offset=HEADER_SIZE).reshape(h, w)
    frames = np.frombuffer(raw, dtype="<u2", count=h * w * t, offset=HEADER_SIZE + h * w * 4).reshape(t, h, w)
    cube = np.ascontiguousarray(np.moveaxis(frames, 0, 2)).astype(np.uint16)
    return LsciSample(cube, dark.astype(np.float32), meta)


def save_sample(sample: LsciSample, path: str | os.PathLike[str]) -> None:
    """write one capture to disk"""
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path: str | os.PathLike[str], meta: Optional[SampleMeta] = None) -> LsciSample:
    """read one capture; its metadata comes from the manifest"""
    try:
        raw = Path(path).read_bytes()
    except OSError as error:
        raise DataError(f"Cannot read sample: {error}", path=str(path)) from error
    return decode_sample(raw, meta, str(path))


def preprocess(sample: LsciSample, t: int, offset: int = 0) -> Tensor:
    """
    Dark-frame correct the leading `t` frames (starting at `offset`), clamp
    at zero, and rescale the clip to [0, 1] by its own min and max. A
    constant clip maps to all zeros. Returns t×H×W float32.
    """
    _, _, frames = sample.shape
    if t < 1 or offset < 0:
        raise DataError(f"Invalid clip request t={t}, offset={offset}")
    if offset + t > frames:
        raise DataError(f"Clip of {t} frames at offset {offset} exceeds the {frames} captured frames")
    clip = np.moveaxis(sample.cube[:, :, offset : offset + t], 2, 0).astype(np.float32)
    clip = np.maximum(clip - sample.dark_avg[None, :, :], 0)
    low = clip.min()
    span = clip.max() - low
    if span <= 0:
        return np.zeros_like(clip, dtype=DTYPE)
    return ((clip - low) / span).astype(DTYPE)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    """a sample file and its metadata"""

    path: str
    meta: SampleMeta

    def to_json(self) -> Dict[str, Any]:
        """one manifest object"""
        return {
            "path": self.path,
            "sample_id": self.meta.sample_id,
            "subject_id": self.meta.subject_id,
            "finger": self.meta.finger.value,
            "label": self.meta.label.value,
            "species": self.meta.species.value if self.meta.species is not None else None,
            "capture_index": self.meta.capture_index,
        }

    @staticmethod
    def from_json(obj: Dict[str, Any]) -> ManifestEntry:
        """parse one manifest object"""
        try:
            species = obj["species"]
            meta = SampleMeta(
                sample_id=str(obj["sample_id"]),
                subject_id=str(obj["subject_id"]),
                finger=Finger(obj["finger"]),
                label=Label(obj["label"]),
                species=Species(species) if species is not None else None,
                capture_index=int(obj["capture_index"]),
            )
            return ManifestEntry(str(obj["path"]), meta)
        except (KeyError, ValueError, TypeError) as error:
            raise DataError(f"Invalid manifest entry: {error}", entry=obj) from error


class Manifest:
    """Ordered sample entries with unique ids, optionally anchored at a directory"""

    def __init__(self, entries: List[ManifestEntry], root: Optional[Path] = None) -> None:
        self.entries = list(entries)
        self.root = root
        self._by_id: Dict[str, ManifestEntry] = {}
        for entry in self.entries:
            if entry.meta.sample_id in self._by_id:
                raise DataError(f'Duplicate sample id "{entry.meta.sample_id}" in manifest')
            self._by_id[entry.meta.sample_id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __contains__(self, sample_id: object) -> bool:
        return sample_id in self._by_id

    def __getitem__(self, sample_id: str) -> ManifestEntry:
        try:
            return self._by_id[sample_id]
        except KeyError as error:
            raise DataError(f'Unknown sample id "{sample_id}"') from error

    @property
    def sample_ids(self) -> List[str]:
        """ids in manifest order"""
        return [entry.meta.sample_id for entry in self.entries]

    def resolve(self, sample_id: str) -> Path:
        """absolute path of a sample file"""
        path = Path(self[sample_id].path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load(self, sample_id: str) -> LsciSample:
        """read a sample and attach its metadata"""
        entry = self[sample_id]
        path = self.resolve(sample_id)
        if not path.exists():
            raise DataError("Manifest points at a missing file", sample=sample_id, path=str(path))
        return load_sample(path, entry.meta)

    def class_counts(self) -> Dict[str, int]:
        """samples per class name (species, or BonaFide)"""
        counts: Dict[str, int] = {}
        for entry in self.entries:
            counts[entry.meta.class_name] = counts.get(entry.meta.class_name, 0) + 1
        return counts

    def to_json(self) -> List[Dict[str, Any]]:
        """the manifest array"""
        return [entry.to_json() for entry in self.entries]

    def save(self, path: str | os.PathLike[str]) -> None:
        """write the manifest as a JSON array"""
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def read(path: str | os.PathLike[str]) -> Manifest:
        """load a manifest; relative sample paths resolve against its directory"""
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as error:
            raise ConfigurationError(f"Cannot read manifest: {error}", path=str(path)) from error
        except json.JSONDecodeError as error:
            raise DataError(f"Manifest is not valid JSON: {error}", path=str(path)) from error
        if not isinstance(raw, list):
            raise DataError("Manifest must be a JSON array", path=str(path))
        return Manifest([ManifestEntry.from_json(obj) for obj in raw], root=path.parent)
