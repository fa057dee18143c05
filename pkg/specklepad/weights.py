"""
Versioned flat binary for trained weights: a shape table followed by
float32 payloads, enough to rebuild a network without its build seed
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
import struct
from typing import Dict, List, Tuple

import numpy as np

from specklepad.architectures import ArchKind, Network, build
from specklepad.error import ConfigurationError, FormatError, TruncatedSampleError
from specklepad.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"SPW1"
FORMAT_VERSION = 1
# magic, version, kind, h, w, t, parameter count
HEADER = struct.Struct("<4sHBIIII")
NAME_LENGTH = struct.Struct("<H")
NDIM = struct.Struct("<B")


def encode_weights(net: Network) -> bytes:
    """Serialize the network kind, geometry and every parameter"""
    h, w, t = net.geometry
    params = net.params()
    table = [HEADER.pack(MAGIC, FORMAT_VERSION, int(net.kind), h, w, t, len(params))]
    for param in params:
        name = param.name.encode("utf-8")
        table.append(NAME_LENGTH.pack(len(name)) + name)
        table.append(NDIM.pack(param.value.ndim) + struct.pack(f"<{param.value.ndim}I", *param.value.shape))
    payloads = [np.ascontiguousarray(p.value, dtype="<f4").tobytes() for p in params]
    return b"".join(table + payloads)


class _Reader:
    def __init__(self, raw: bytes, source: str) -> None:
        self.raw = raw
        self.source = source
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise TruncatedSampleError("Weight file ended early", path=self.source, offset=self.offset)
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct) -> Tuple[int, ...]:
        return layout.unpack(self.take(layout.size))


def decode_weights(raw: bytes, source: str = "<bytes>") -> Tuple[ArchKind, Tuple[int, int, int], Dict[str, Tensor]]:
    """Parse a weight file into (kind, geometry, values by name)"""
    reader = _Reader(raw, source)
    magic, version, kind, h, w, t, count = reader.unpack(HEADER)
    if magic != MAGIC:
        raise FormatError(f"Bad weight file magic {magic!r}", path=source)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported weight file version {version}", path=source)
    try:
        arch = ArchKind(kind)
    except ValueError as error:
        raise FormatError(f"Unknown architecture code {kind}", path=source) from error

    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    for _ in range(count):
        (length,) = reader.unpack(NAME_LENGTH)
        name = reader.take(length).decode("utf-8")
        (ndim,) = reader.unpack(NDIM)
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        shapes.append((name, tuple(dims)))

    values = {}
    for name, shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        values[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(DTYPE)
    if reader.offset != len(raw):
        raise FormatError(f"{len(raw) - reader.offset} trailing bytes after the weights", path=source)
    return arch, (h, w, t), values


def save_weights(net: Network, path: str | os.PathLike[str]) -> None:
    """write a network's weights"""
    Path(path).write_bytes(encode_weights(net))


def load_weights(path: str | os.PathLike[str]) -> Network:
    """Rebuild the network a weight file describes and load its values"""
    try:
        raw = Path(path).read_bytes()
    except OSError as error:
        raise ConfigurationError(f"Cannot read weights: {error}", path=str(path)) from error
    kind, (h, w, t), values = decode_weights(raw, str(path))
    net = build(kind, h, w, t, seed=0)
    try:
        net.restore(values)
    except ConfigurationError as error:
        raise FormatError(f"Weights do not fit {kind.name} {h}x{w}x{t}: {error}", path=str(path)) from error
    logger.debug("loaded %s %dx%dx%d from %s", kind.name, h, w, t, path)
    return net
