import struct
import zlib

import numpy as np
import pytest

from tinyq import nnf, ptq
from tinyq.errors import BadMagicError, ChecksumError, FormatError, TruncatedError, UnsupportedVersionError
from tinyq.nnf import Dense, ModelGraph
from tinyq.shell import formats
from tinyq.tensor import FloatTensor, QuantParams, QuantTensor

from aicm_walk import walk


def recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def corruption_sweep(data: bytes, parse, stride=1):
    """Flip every ``stride``-th byte; each corruption must raise before any model is built."""
    for pos in range(0, len(data), stride):
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        expected = BadMagicError if pos < 4 else ChecksumError
        with pytest.raises(expected):
            parse(bytes(bad))


class TestModelRoundTrip:
    def test_quant_bit_exact(self, qmodel, tmp_path):
        path = tmp_path / "m.aicm"
        n = formats.save_model(qmodel, path)
        back = formats.load_model(path)
        data = formats.serialize_model(qmodel)
        assert n == len(data) == path.stat().st_size
        assert formats.serialize_model(back) == data
        assert back.class_labels == qmodel.class_labels
        for a, b in zip(back.site_params, qmodel.site_params):
            assert a == b

    def test_float_bit_exact(self, graph, tmp_path):
        path = tmp_path / "f.aicm"
        formats.save_model(graph, path)
        back = formats.load_model(path)
        assert formats.serialize_model(back) == formats.serialize_model(graph)
        for a, b in zip(back.layers, graph.layers):
            if hasattr(a, "weights"):
                assert a.weights.data.tobytes() == b.weights.data.tobytes()

    def test_loaded_model_infers_identically(self, qmodel, dataset):
        back = formats.parse_model(formats.serialize_model(qmodel))
        for x, _ in dataset[:10]:
            assert ptq.forward_q(back, x).data.tobytes() == ptq.forward_q(qmodel, x).data.tobytes()

    def test_layout_matches_independent_walker(self, graph, qmodel):
        for m, kind in ((graph, 0), (qmodel, 1)):
            summary = walk(formats.serialize_model(m))
            assert summary["version"] == 1 and summary["kind"] == kind
            assert summary["input_dims"] == [3, 16, 16]
            assert summary["tags"] == [1, 2, 3, 1, 2, 3, 4, 5, 6]

    def test_header_bytes(self, qmodel):
        data = formats.serialize_model(qmodel)
        assert data[:4] == bytes([0x41, 0x49, 0x43, 0x4D])
        assert struct.unpack_from("<IB", data, 4) == (1, 1)


class TestModelErrors:
    def test_crc_sweep_quant(self, qmodel):
        corruption_sweep(formats.serialize_model(qmodel), formats.parse_model)

    def test_crc_sweep_float(self, graph):
        corruption_sweep(formats.serialize_model(graph), formats.parse_model, stride=7)

    def test_bad_magic(self, qmodel):
        data = b"XXXX" + formats.serialize_model(qmodel)[4:]
        with pytest.raises(BadMagicError):
            formats.parse_model(data)

    def test_unsupported_version(self, qmodel):
        body = bytearray(formats.serialize_model(qmodel)[:-4])
        body[4:8] = struct.pack("<I", 2)
        with pytest.raises(UnsupportedVersionError, match="version 2"):
            formats.parse_model(recrc(bytes(body)))

    def test_truncated(self, qmodel):
        data = formats.serialize_model(qmodel)
        with pytest.raises(TruncatedError):
            formats.parse_model(data[:10])
        # a consistent CRC over a cut body still fails on the declared sizes
        with pytest.raises(TruncatedError):
            formats.parse_model(recrc(data[:-104]))

    def test_trailing_bytes(self, qmodel):
        with pytest.raises(FormatError):
            formats.parse_model(recrc(formats.serialize_model(qmodel)[:-4] + b"\0"))

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, ChecksumError, TruncatedError, UnsupportedVersionError}
        assert all(issubclass(k, FormatError) for k in kinds)
        assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.aicm"):
            formats.load_model(tmp_path / "nope.aicm")


class TestSize:
    def test_fixture_ratio(self, graph, qmodel):
        ratio = formats.size_ratio(graph, qmodel)
        assert ratio >= 3.8
        assert ratio == formats.serialized_size(graph) / formats.serialized_size(qmodel)

    def test_size_from_field_arithmetic(self, graph, qmodel):
        # only the weight payload differs in width, plus the quant-only qparams/multiplier/site fields
        n_w = sum(l.weights.data.size for l in graph.layers if hasattr(l, "weights"))
        n_b = sum(l.bias.data.size for l in graph.layers if hasattr(l, "weights"))
        n_weighted = 3
        n_sites = len(qmodel.site_params)
        diff = 3 * n_w - n_weighted * (8 + 8 + 8 + 8) - 8 * n_sites - 4
        assert formats.serialized_size(graph) - formats.serialized_size(qmodel) == diff
        assert n_b == 32 + 32 + 3

    def test_ratio_tends_to_four(self):
        ratios = []
        for n in (16, 256, 4096):
            g = ModelGraph([n], [Dense(np.ones((4, n)), np.zeros(4))])
            m = ptq.quantize_model(g, ptq.calibrate(g, [FloatTensor(np.ones(n))]))
            ratios.append(formats.size_ratio(g, m))
        assert ratios[0] < ratios[1] < ratios[2] < 4
        assert ratios[2] > 3.9

    def test_empty_model_ratio(self):
        g = ModelGraph([3, 4, 4], [])
        m = ptq.quantize_model(g, ptq.calibrate(g, [FloatTensor(np.zeros((3, 4, 4)))]))
        assert formats.size_ratio(g, m) == pytest.approx(1.0, abs=0.5)

    def test_architecture_mismatch(self, qmodel):
        with pytest.raises(FormatError):
            formats.size_ratio(nnf.fixture_model(8), qmodel)


class TestTensorFormat:
    @pytest.mark.parametrize("shape", [[5], [2, 3], [3, 4, 5], [1, 2, 3, 4]])
    def test_float_round_trip(self, rng, shape, tmp_path):
        t = FloatTensor(rng.standard_normal(shape))
        path = tmp_path / "t.atns"
        formats.save_tensor(t, path)
        back = formats.load_tensor(path)
        assert isinstance(back, FloatTensor)
        assert back.data.tobytes() == t.data.tobytes()
        assert back.shape == t.shape

    def test_quant_round_trip(self, rng):
        t = QuantTensor(rng.integers(-128, 128, size=(3, 4)), QuantParams(0.0123, -7))
        back = formats.parse_tensor(formats.serialize_tensor(t))
        assert isinstance(back, QuantTensor)
        assert back.data.tobytes() == t.data.tobytes()
        assert back.qparams == t.qparams

    def test_layout(self):
        data = formats.serialize_tensor(FloatTensor(np.array([[1.0, 2.0]], dtype=np.float32)))
        assert data[:4] == b"ATNS"
        assert struct.unpack_from("<BBII", data, 4) == (0, 2, 1, 2)
        np.testing.assert_array_equal(np.frombuffer(data[14:22], "<f4"), [1.0, 2.0])
        assert len(data) == 26

    def test_crc_sweep(self, rng):
        for t in (FloatTensor(rng.standard_normal((3, 8, 8))),
                  QuantTensor(rng.integers(-128, 128, size=(3, 8, 8)), QuantParams(0.5, 3))):
            corruption_sweep(formats.serialize_tensor(t), formats.parse_tensor)

    def test_errors(self):
        data = formats.serialize_tensor(FloatTensor(np.zeros(4)))
        with pytest.raises(BadMagicError):
            formats.parse_tensor(b"AICM" + data[4:])
        with pytest.raises(TruncatedError):
            formats.parse_tensor(recrc(data[:-8]))
