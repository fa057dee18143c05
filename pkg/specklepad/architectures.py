"""
The five patch classifiers: three 2-D networks that read time as channels
(BaseN, ResN, IncpN), a 3-D network over the patch volume (Conv3), and a
two-layer LSTM over vectorized frames (Lstm).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import IntEnum, auto
import logging
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from specklepad.error import ConfigurationError
from specklepad.layers import (
    Conv,
    Flatten,
    GlobalAvgPool,
    Inception,
    LastStep,
    Layer,
    Linear,
    Lstm,
    MaxPool,
    Relu,
    ResidualBlock,
    Sequential,
    Sigmoid,
)
from specklepad.tensor import DTYPE, Param, Tensor, check_finite

logger = logging.getLogger(__name__)

SPATIAL_SIZES = (8, 16, 32, 64)
TEMPORAL_SIZES = (5, 10, 50, 100)

CHANNELS = (16, 16, 32, 32, 64, 64)
CONV3_KERNEL = (5, 3, 3)
CONV3_PADDING = (2, 1, 1)
LSTM_HIDDEN = 100
INCEPTION_STEM = 16
INCEPTION_BRANCH = 8


# pylint: disable=invalid-name
class ArchKind(IntEnum):
    """The closed set of network families"""

    BaseN = auto()
    ResN = auto()
    IncpN = auto()
    Conv3 = auto()
    Lstm = auto()

    @staticmethod
    def parse(text: str) -> ArchKind:
        """Look a kind up by name, ignoring case"""
        for kind in ArchKind:
            if kind.name.lower() == text.strip().lower():
                return kind
        raise ConfigurationError(f'Unknown architecture "{text}"', choices=[k.name for k in ArchKind])

    @property
    def is_2d(self) -> bool:
        """time is read as input channels"""
        return self in (ArchKind.BaseN, ArchKind.ResN, ArchKind.IncpN)


Geometry = Tuple[int, int, int]


@dataclass
class Network:
    """An assembled architecture with its parameter store"""

    kind: ArchKind
    geometry: Geometry
    body: Sequential
    param_table: Dict[str, Param] = field(init=False)

    def __post_init__(self) -> None:
        self.param_table = {p.name: p for p in self.body.params()}

    def params(self) -> List[Param]:
        """parameters in construction order"""
        return list(self.param_table.values())

    @property
    def param_count(self) -> int:
        """total number of scalar weights"""
        return sum(p.size for p in self.param_table.values())

    def input_shape(self, batch: int) -> Tuple[int, ...]:
        """Shape of the array `forward` expects for a batch of patches"""
        h, w, t = self.geometry
        match self.kind:
            case ArchKind.Conv3:
                return (batch, 1, t, h, w)
            case ArchKind.Lstm:
                return (t, batch, h * w)
            case _:
                return (batch, t, h, w)

    def _coerce(self, patches: Tensor | Sequence[Tensor]) -> Tensor:
        if isinstance(patches, (list, tuple)):
            if self.kind is not ArchKind.Lstm:
                raise ConfigurationError(f"{self.kind.name} does not take a sequence input")
            patches = np.stack(patches)
        x = np.asarray(patches)
        batch = x.shape[1] if self.kind is ArchKind.Lstm and x.ndim == 3 else x.shape[0]
        if x.shape != self.input_shape(batch):
            raise ConfigurationError(
                f"{self.kind.name} expects input of shape {self.input_shape(batch)}, got {x.shape}",
                kind=self.kind.name,
            )
        return x.astype(DTYPE, copy=False)

    def forward(self, patches: Tensor | Sequence[Tensor]) -> Tuple[Tensor, Any]:
        """Patch scores in [0, 1] and the tape `backward` needs"""
        x = self._coerce(patches)
        out, tape = self.body.forward(x)
        return check_finite(out[:, 0], f"{self.kind.name} scores"), tape

    def backward(self, dscores: Tensor, tape: Any) -> None:
        """Accumulate parameter gradients for a score gradient"""
        self.body.backward(dscores.reshape(-1, 1).astype(DTYPE, copy=False), tape)

    def zero_grad(self) -> None:
        """reset every gradient slot"""
        for param in self.param_table.values():
            param.zero_grad()

    def snapshot(self) -> Dict[str, Tensor]:
        """copy of every parameter value"""
        return {name: p.value.copy() for name, p in self.param_table.items()}

    def restore(self, values: Dict[str, Tensor]) -> None:
        """load parameter values, checking names and shapes"""
        if set(values) != set(self.param_table):
            raise ConfigurationError("Parameter names do not match the network", kind=self.kind.name)
        for name, value in values.items():
            param = self.param_table[name]
            if value.shape != param.value.shape:
                raise ConfigurationError(f"Shape mismatch for {name}: {value.shape} vs {param.value.shape}")
            param.value = np.array(value, dtype=param.value.dtype)


def check_geometry(h: int, w: int, t: int) -> None:
    """spatial sizes come from the sweep, time may be any positive length"""
    if h not in SPATIAL_SIZES or w not in SPATIAL_SIZES:
        raise ConfigurationError(f"Unsupported spatial patch size {h}x{w}", supported=SPATIAL_SIZES)
    if t < 1:
        raise ConfigurationError(f"Temporal patch size must be positive, got {t}")


def _can_halve(size: int) -> bool:
    return size // 2 >= 2


def _head(rng: np.random.Generator, features: int) -> List[Layer]:
    return [Flatten("flatten"), Linear("fc", rng, features, 1), Sigmoid("sigmoid")]


def _build_basen(rng: np.random.Generator, h: int, w: int, t: int) -> List[Layer]:
    layers: List[Layer] = []
    channels_in = t
    for index, channels in enumerate(CHANNELS, start=1):
        layers += [Conv(f"conv{index}", rng, channels_in, channels, (3, 3), 1), Relu(f"relu{index}")]
        channels_in = channels
        if index % 2 == 0 and _can_halve(h) and _can_halve(w):
            layers.append(MaxPool(f"pool{index // 2}", (2, 2)))
            h, w = h // 2, w // 2
    return layers + _head(rng, channels_in * h * w)


def _build_resn(rng: np.random.Generator, h: int, w: int, t: int) -> List[Layer]:
    layers: List[Layer] = []
    channels_in = t
    for index, channels in enumerate(CHANNELS[1::2], start=1):
        layers.append(ResidualBlock(f"block{index}", rng, channels_in, channels))
        channels_in = channels
        if _can_halve(h) and _can_halve(w):
            layers.append(MaxPool(f"pool{index}", (2, 2)))
            h, w = h // 2, w // 2
    return layers + _head(rng, channels_in * h * w)


def _build_incpn(rng: np.random.Generator, h: int, w: int, t: int) -> List[Layer]:
    del h, w  # global average pooling makes the head size-independent
    return [
        Conv("stem", rng, t, INCEPTION_STEM, (3, 3), 1),
        Relu("stem_relu"),
        Inception("inception1", rng, INCEPTION_STEM, INCEPTION_BRANCH),
        Inception("inception2", rng, 4 * INCEPTION_BRANCH, INCEPTION_BRANCH),
        GlobalAvgPool("avgpool"),
        Linear("fc", rng, 4 * INCEPTION_BRANCH, 1),
        Sigmoid("sigmoid"),
    ]


def _build_conv3(rng: np.random.Generator, h: int, w: int, t: int) -> List[Layer]:
    layers: List[Layer] = []
    channels_in = 1
    depth = t
    for index, channels in enumerate(CHANNELS, start=1):
        layers += [
            Conv(f"conv{index}", rng, channels_in, channels, CONV3_KERNEL, CONV3_PADDING),
            Relu(f"relu{index}"),
        ]
        channels_in = channels
        if index % 2 == 0:
            # time is only pooled while the pooled clip still spans a whole kernel
            kd = 2 if depth // 2 >= CONV3_KERNEL[0] else 1
            kh = 2 if _can_halve(h) and _can_halve(w) else 1
            if (kd, kh) != (1, 1):
                layers.append(MaxPool(f"pool{index // 2}", (kd, kh, kh)))
                depth, h, w = depth // kd, h // kh, w // kh
    return layers + _head(rng, channels_in * depth * h * w)


def _build_lstm(rng: np.random.Generator, h: int, w: int, t: int) -> List[Layer]:
    del t  # the recurrence runs over however many frames arrive
    return [
        Lstm("lstm1", rng, h * w, LSTM_HIDDEN),
        Lstm("lstm2", rng, LSTM_HIDDEN, LSTM_HIDDEN),
        LastStep("last"),
        Linear("fc", rng, LSTM_HIDDEN, 1),
        Sigmoid("sigmoid"),
    ]


def build(kind: ArchKind, h: int, w: int, t: int, seed: int) -> Network:
    """Assemble a freshly initialized network for h×w×t patches"""
    check_geometry(h, w, t)
    rng = np.random.default_rng(seed)
    match kind:
        case ArchKind.BaseN:
            layers = _build_basen(rng, h, w, t)
        case ArchKind.ResN:
            layers = _build_resn(rng, h, w, t)
        case ArchKind.IncpN:
            layers = _build_incpn(rng, h, w, t)
        case ArchKind.Conv3:
            layers = _build_conv3(rng, h, w, t)
        case ArchKind.Lstm:
            layers = _build_lstm(rng, h, w, t)
    net = Network(kind, (h, w, t), Sequential(kind.name, layers))
    logger.debug("built %s for %dx%dx%d with %d parameters", kind.name, h, w, t, net.param_count)
    return net


def forward_scores(net: Network, patches: Tensor | Sequence[Tensor]) -> Tensor:
    """Score a batch of patches presented in the view the network expects"""
    scores, _ = net.forward(patches)
    return scores


@dataclass(frozen=True)
class LayerSummary:
    """one row of a network summary"""

    name: str
    kind: str
    output_shape: Tuple[int, ...]
    param_count: int
    children: List[str]


@dataclass(frozen=True)
class NetworkSummary:
    """Layer-by-layer shapes and parameter counts"""

    kind: str
    geometry: Geometry
    layers: List[LayerSummary]
    param_count: int

    def to_json(self) -> Dict[str, Any]:
        """plain dict, ready for json.dumps"""
        return asdict(self)

    def __str__(self) -> str:
        h, w, t = self.geometry
        lines = [f"{self.kind} {h}x{w}x{t}"]
        for row in self.layers:
            shape = "x".join(str(n) for n in row.output_shape)
            lines.append(f"  {row.name:<14} {row.kind:<14} {shape:<20} {row.param_count:>10,}")
        lines.append(f"  total parameters {self.param_count:,}")
        return "\n".join(lines)


def describe(net: Network) -> NetworkSummary:
    """Trace a single zero patch through the network and record each layer"""
    x: Tensor = np.zeros(net.input_shape(1), dtype=DTYPE)
    rows = []
    for layer in net.body.layers:
        x, _ = layer.forward(x)
        shape = tuple(x.shape[1:]) if net.kind is not ArchKind.Lstm or x.ndim == 2 else (x.shape[0], x.shape[2])
        rows.append(
            LayerSummary(
                layer.name,
                type(layer).__name__,
                shape,
                layer.param_count(),
                [child.name for child in layer.children()],
            )
        )
    return NetworkSummary(net.kind.name, net.geometry, rows, net.param_count)
