"""
Fit a network on the patches of a split and score whole samples
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import logging
import math
import threading
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from more_itertools import chunked
import numpy as np

from specklepad.architectures import ArchKind, Network
from specklepad.data import LsciSample, Manifest, SampleMeta, preprocess
from specklepad.error import ConfigurationError, DataError, NumericError, TrainingError
from specklepad.kernels import bce_loss
from specklepad.metrics import ScoredSample, ScoreSet
from specklepad.optim import BETA1, BETA2, EPSILON, adam_step
from specklepad.partition import Split
from specklepad.patching import PatchBatch, PatchSpec, aggregate, extract_patches, extract_roi, patch_view
from specklepad.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

SCORE_BATCH = 256

RegionKey = Tuple[int, int, Optional[int]]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training job"""

    arch: ArchKind = ArchKind.Lstm
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(8, 8, 100))
    lr: float = 2e-4
    epochs: int = 50
    batch: int = 64
    seed: int = 0
    oversample_attacks: bool = False
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1 or self.eps <= 0:
            raise ConfigurationError(
                "Learning rate, epochs, batch size and epsilon must be positive",
                lr=self.lr,
                epochs=self.epochs,
                batch=self.batch,
            )
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)", beta1=self.beta1, beta2=self.beta2)

    @property
    def train_stride(self) -> int:
        """stride of the training patches"""
        return self.patch.fit_stride


@dataclass
class TrainHistory:
    """Per-epoch losses and the epoch whose weights were kept"""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = 0

    def to_json(self) -> Dict[str, Any]:
        """plain dict, ready for json.dumps"""
        return asdict(self)


def best_epoch(losses: Sequence[float]) -> int:
    """1-based epoch of the smallest loss; the earliest wins a tie"""
    if not losses:
        raise DataError("No losses to choose from")
    return int(np.argmin(np.asarray(losses, dtype=np.float64))) + 1


class ClipStore:
    """
    Loads samples on demand and caches their preprocessed regions, keyed by
    (sample_id, t, offset, roi). Safe to share between threads. Callers that
    move on to a new clip geometry should `release` the old one.
    """

    def __init__(self, loader: Callable[[str], LsciSample], metas: Mapping[str, SampleMeta]) -> None:
        self.loader = loader
        self.metas = dict(metas)
        self._cache: Dict[Tuple[str, RegionKey], Tensor] = {}
        self._lock = threading.Lock()

    @staticmethod
    def region_key(spec: PatchSpec) -> RegionKey:
        """(t, offset, roi) of the clips a patch spec reads; roi is None for full frames"""
        return spec.t, spec.offset, None if spec.full_frame else spec.roi

    @staticmethod
    def from_manifest(manifest: Manifest) -> ClipStore:
        """read samples through a manifest"""
        return ClipStore(manifest.load, {e.meta.sample_id: e.meta for e in manifest})

    @staticmethod
    def from_samples(samples: Iterable[LsciSample]) -> ClipStore:
        """serve samples that already live in memory; each needs its metadata"""
        table = {}
        for sample in samples:
            if sample.meta is None:
                raise DataError("In-memory samples need metadata")
            table[sample.meta.sample_id] = sample
        return ClipStore(table.__getitem__, {k: s.meta for k, s in table.items() if s.meta is not None})

    def meta(self, sample_id: str) -> SampleMeta:
        """metadata of a known sample"""
        try:
            return self.metas[sample_id]
        except KeyError as error:
            raise DataError(f'Unknown sample id "{sample_id}"') from error

    def region(self, sample_id: str, spec: PatchSpec) -> Tensor:
        """preprocessed t×H×W clip, cropped to the ROI unless the spec is full-frame"""
        key = (sample_id, self.region_key(spec))
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            logger.debug("clip cache hit for %s", sample_id)
            return cached
        self.meta(sample_id)
        clip = preprocess(self.loader(sample_id), spec.t, spec.offset)
        region = clip if spec.full_frame else np.ascontiguousarray(extract_roi(clip, spec.roi))
        with self._lock:
            self._cache.setdefault(key, region)
        return region

    def release(self, spec: PatchSpec) -> int:
        """drop every cached region of this clip geometry, returning how many were held"""
        wanted = self.region_key(spec)
        with self._lock:
            stale = [key for key in self._cache if key[1] == wanted]
            for key in stale:
                del self._cache[key]
        if stale:
            logger.debug("released %d cached clips of t=%d offset=%d roi=%s", len(stale), *wanted)
        return len(stale)

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)

    def patches(self, sample_id: str, spec: PatchSpec, training: bool = False) -> PatchBatch:
        """all patches of one sample"""
        stride = spec.fit_stride if training else spec.eval_stride
        return extract_patches(self.region(sample_id, spec), spec, sample_id, stride)


@dataclass(frozen=True)
class PatchSet:
    """patches with their 0/1 targets"""

    batch: PatchBatch
    targets: Tensor

    def __len__(self) -> int:
        return len(self.batch)

    def take(self, indices: Sequence[int]) -> PatchSet:
        """subset in the given order"""
        return PatchSet(self.batch.take(indices), self.targets[np.asarray(indices, dtype=np.intp)])

    def classes(self) -> Tuple[int, int]:
        """(bona fide, attack) patch counts"""
        attacks = int(np.sum(self.targets == 1))
        return len(self) - attacks, attacks


def build_patch_set(store: ClipStore, sample_ids: Iterable[str], spec: PatchSpec, training: bool) -> PatchSet:
    """Patches of every listed sample, in sorted sample order"""
    batches = []
    targets = []
    for sample_id in sorted(sample_ids):
        batch = store.patches(sample_id, spec, training)
        batches.append(batch)
        targets.append(np.full(len(batch), store.meta(sample_id).label.target, dtype=DTYPE))
    if not batches:
        raise DataError("No samples to cut patches from")
    return PatchSet(PatchBatch.concat(batches), np.concatenate(targets))


def _forward(net: Network, patches: PatchBatch) -> Tuple[Tensor, Any]:
    return net.forward(patch_view(net.kind, patches))


def patch_loss(net: Network, data: PatchSet, batch: int = SCORE_BATCH) -> float:
    """Mean binary cross entropy over every patch, without touching gradients"""
    total = []
    for chunk in chunked(range(len(data)), batch):
        part = data.take(chunk)
        scores, _ = _forward(net, part.batch)
        loss, _ = bce_loss(scores, part.targets)
        total.append(loss * len(chunk))
    return math.fsum(total) / len(data)


def _epoch_order(rng: np.random.Generator, data: PatchSet, oversample: bool) -> Tensor:
    indices = np.arange(len(data))
    if oversample:
        attacks = np.flatnonzero(data.targets == 1)
        bonafide_count, attack_count = data.classes()
        if 0 < attack_count < bonafide_count:
            extra = rng.choice(attacks, size=bonafide_count - attack_count, replace=True)
            indices = np.concatenate([indices, extra])
    return rng.permutation(indices)


def _warn_if_degenerate(name: str, data: PatchSet) -> None:
    bonafide, attacks = data.classes()
    if bonafide == 0 or attacks == 0:
        logger.warning("%s set lacks a class (%d bona fide / %d attack patches)", name, bonafide, attacks)


def fit(net: Network, train_set: PatchSet, val_set: Optional[PatchSet], cfg: TrainConfig) -> TrainHistory:
    """
    Mini-batch Adam on binary cross entropy. After the last epoch the
    network holds the weights of the epoch with the lowest validation
    loss; without a validation set the training loss decides.
    """
    if len(train_set) == 0:
        raise DataError("Training set is empty")
    _warn_if_degenerate("training", train_set)
    if val_set is None or len(val_set) == 0:
        logger.warning("no validation patches; the best epoch is chosen by training loss")
        val_set = None
    else:
        _warn_if_degenerate("validation", val_set)

    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_loss = math.inf
    best_weights = net.snapshot()
    selections: List[float] = []
    net.zero_grad()
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(rng, train_set, cfg.oversample_attacks)
        losses = []
        for index, chunk in enumerate(chunked(order.tolist(), cfg.batch)):
            part = train_set.take(chunk)
            try:
                scores, tape = _forward(net, part.batch)
                loss, grad = bce_loss(scores, part.targets)
                if not math.isfinite(loss):
                    raise TrainingError("Non-finite loss")
                net.backward(grad, tape)
                adam_step(net.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NumericError as error:
                raise TrainingError(str(error), epoch=epoch, batch=index, **error.context) from error
            logger.debug("epoch %d batch %d loss %.6f", epoch, index, loss)
            losses.append(loss * len(chunk))
        train_loss = math.fsum(losses) / len(order)
        val_loss = patch_loss(net, val_set) if val_set is not None else None
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        logger.info(
            "epoch %d/%d train loss %.5f val loss %s",
            epoch,
            cfg.epochs,
            train_loss,
            f"{val_loss:.5f}" if val_loss is not None else "n/a",
        )
        selection = val_loss if val_loss is not None else train_loss
        selections.append(selection)
        if selection < best_loss:
            best_loss = selection
            best_weights = net.snapshot()

    history.best_epoch = best_epoch(selections)
    net.restore(best_weights)
    return history


def train(net: Network, split: Split, store: ClipStore, cfg: TrainConfig) -> Tuple[Network, TrainHistory]:
    """Cut the split's train and val samples into patches and fit the network"""
    if cfg.arch is not net.kind:
        raise ConfigurationError(f"Config is for {cfg.arch.name}, network is {net.kind.name}")
    h, w, t = net.geometry
    if (cfg.patch.h, cfg.patch.w, cfg.patch.t) != (h, w, t):
        raise ConfigurationError("Patch spec does not match the network geometry", network=net.geometry)
    train_set = build_patch_set(store, split.train, cfg.patch, training=True)
    val_set = build_patch_set(store, split.val, cfg.patch, training=False) if split.val else None
    logger.info(
        "training %s on %d patches (%d val)", net.kind.name, len(train_set), len(val_set) if val_set else 0
    )
    history = fit(net, train_set, val_set, cfg)
    return net, history


def score_samples(
    net: Network, sample_ids: Iterable[str], store: ClipStore, spec: PatchSpec, workers: int = 1
) -> ScoreSet:
    """Mean patch score of each sample; samples may be scored in parallel"""

    def score(sample_id: str) -> ScoredSample:
        patches = store.patches(sample_id, spec, training=False)
        values = []
        for chunk in chunked(range(len(patches)), SCORE_BATCH):
            scores, _ = _forward(net, patches.take(chunk))
            values.extend(float(s) for s in scores)
        sample_score, _ = aggregate(values)
        meta = store.meta(sample_id)
        return ScoredSample(sample_id, meta.label, sample_score, meta.species)

    ordered = sorted(sample_ids)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return ScoreSet(pool.map(score, ordered))
