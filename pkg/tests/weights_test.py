# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring

from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

import numpy as np
from numpy.testing import assert_array_equal

from specklepad.architectures import ArchKind, build, forward_scores
from specklepad.error import ConfigurationError, FormatError, TruncatedSampleError
from specklepad.weights import HEADER, decode_weights, encode_weights, load_weights, save_weights


class WeightFiles(TestCase):
    def test_reload_scores_identically(self) -> None:
        for kind in ArchKind:
            with self.subTest(kind=kind.name):
                net = build(kind, 8, 8, 5, seed=6)
                x = np.random.default_rng(0).random(net.input_shape(3)).astype(np.float32)
                with TemporaryDirectory() as tmp:
                    path = Path(tmp) / "weights.spw"
                    save_weights(net, path)
                    loaded = load_weights(path)
                self.assertIs(loaded.kind, kind)
                self.assertEqual(loaded.geometry, (8, 8, 5))
                assert_array_equal(forward_scores(loaded, x), forward_scores(net, x))

    def test_header(self) -> None:
        kind, geometry, values = decode_weights(encode_weights(build(ArchKind.Lstm, 8, 8, 100, seed=0)))
        self.assertIs(kind, ArchKind.Lstm)
        self.assertEqual(geometry, (8, 8, 100))
        self.assertEqual(sum(v.size for v in values.values()), 146_501)

    def test_bad_magic(self) -> None:
        raw = bytearray(encode_weights(build(ArchKind.BaseN, 8, 8, 5, seed=0)))
        raw[:4] = b"LSC1"
        with self.assertRaises(FormatError):
            decode_weights(bytes(raw))

    def test_unknown_architecture(self) -> None:
        raw = bytearray(encode_weights(build(ArchKind.BaseN, 8, 8, 5, seed=0)))
        raw[6] = 42
        with self.assertRaises(FormatError):
            decode_weights(bytes(raw))

    def test_truncated(self) -> None:
        raw = encode_weights(build(ArchKind.BaseN, 8, 8, 5, seed=0))
        with self.assertRaises(TruncatedSampleError):
            decode_weights(raw[:-4])
        with self.assertRaises(TruncatedSampleError):
            decode_weights(raw[: HEADER.size - 1])

    def test_trailing_bytes(self) -> None:
        with self.assertRaises(FormatError):
            decode_weights(encode_weights(build(ArchKind.BaseN, 8, 8, 5, seed=0)) + b"\0\0\0\0")

    def test_shapes_must_fit_the_network(self) -> None:
        net = build(ArchKind.BaseN, 8, 8, 5, seed=0)
        raw = encode_weights(net).replace(b"\x05\x00\x00\x00", b"\x06\x00\x00\x00", 1)
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "weights.spw"
            path.write_bytes(raw)
            with self.assertRaises(FormatError):
                load_weights(path)

    def test_missing_file(self) -> None:
        with self.assertRaises(ConfigurationError):
            load_weights("/nonexistent/weights.spw")
