from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyq import nnf, ptq
from tinyq.errors import QuantizationError, ShapeError
from tinyq.nnf import Conv2D, Dense, MaxPool2D, ModelGraph, ReLU
from tinyq.ptq import FixedPointMultiplier, QConv2D, QDense
from tinyq.tensor import FloatTensor, QuantParams, QuantTensor, make_tensor


def rha_fraction(v: Fraction) -> int:
    """Round half away from zero on an exact rational."""
    mag = abs(v)
    q = int(mag)
    if mag - q >= Fraction(1, 2):
        q += 1
    return q if v >= 0 else -q


def requant_oracle(acc: int, f: FixedPointMultiplier, z: int) -> int:
    return max(-128, min(127, rha_fraction(Fraction(acc * f.m0, 2**f.shift)) + z))


def qconv_oracle(q_in, z_in, w, bias, stride, pad):
    """Integer accumulators by brute force, Python ints throughout."""
    cin, h, wd = q_in.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    acc = np.zeros((cout, ho, wo), dtype=object)
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = int(bias[o])
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            r, q = i * stride - pad + u, j * stride - pad + v
                            if 0 <= r < h and 0 <= q < wd:
                                s += (int(q_in[c, r, q]) - z_in) * int(w[o, c, u, v])
                acc[o, i, j] = s
    return acc


def random_qparams(rng, zp=None):
    return QuantParams(float(rng.uniform(0.001, 0.1)), int(rng.integers(-128, 128)) if zp is None else zp)


def random_qconv(rng):
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    in_qp, out_qp = random_qparams(rng), random_qparams(rng)
    w_qp = QuantParams(float(rng.uniform(0.001, 0.05)), 0)
    layer = QConv2D(
        weights=rng.integers(-127, 128, size=(cout, cin, k, k)).astype(np.int8),
        bias=rng.integers(-5000, 5000, size=cout).astype(np.int32),
        stride=stride, padding=pad, w_qparams=w_qp, in_qparams=in_qp, out_qparams=out_qp,
        multiplier=ptq.fxp_from_real(in_qp.scale * w_qp.scale / out_qp.scale),
    )
    qx = QuantTensor(rng.integers(-128, 128, size=(cin, h, w)).astype(np.int8), in_qp)
    return layer, qx


class TestRounding:
    def test_half_away(self):
        np.testing.assert_array_equal(ptq.round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 2.4999])),
                                      [1, -1, 2, -3, 2])

    def test_largest_double_below_half(self):
        x = np.nextafter(0.5, 0)
        assert ptq.round_half_away(x) == 0.0
        assert ptq.round_half_away(-x) == 0.0


class TestQParams:
    def test_asym_examples(self):
        qp = ptq.qparams_asym(0, 2.55)
        assert qp.scale == pytest.approx(0.01) and qp.zero_point == -128
        qp = ptq.qparams_asym(-1.275, 1.275)
        assert qp.scale == pytest.approx(0.01) and qp.zero_point == 0

    def test_asym_positive_range_extends_to_zero(self):
        qp = ptq.qparams_asym(5, 5)
        assert qp.scale == pytest.approx(5 / 255, rel=1e-6)
        assert qp.zero_point == -128
        x = make_tensor([1], [5.0])
        err = abs(float(ptq.dequantize(ptq.quantize_tensor(x, qp)).data[0]) - 5.0)
        assert err <= qp.scale / 2

    def test_asym_degenerate(self):
        assert ptq.qparams_asym(0, 0) == QuantParams(1.0, 0)

    def test_underflowing_range_is_degenerate(self):
        assert ptq.qparams_asym(0, 1e-140) == QuantParams(1.0, 0)
        assert ptq.qparams_sym(1e-140) == QuantParams(1.0, 0)

    def test_asym_non_finite(self):
        with pytest.raises(QuantizationError):
            ptq.qparams_asym(0, float("inf"))

    def test_sym_examples(self):
        assert ptq.qparams_sym(1.27).scale == pytest.approx(0.01)
        assert ptq.qparams_sym(0) == QuantParams(1.0, 0)
        assert ptq.qparams_sym(127).scale == 1.0
        with pytest.raises(QuantizationError):
            ptq.qparams_sym(-1)


class TestQuantize:
    def test_examples(self):
        q = ptq.quantize_tensor(make_tensor([1], [0.255]), QuantParams(0.01, 0))
        assert q.data[0] == 26
        q = ptq.quantize_tensor(make_tensor([1], [1.0]), QuantParams(0.01, -128))
        assert q.data[0] == -28

    def test_clamps(self):
        q = ptq.quantize_tensor(make_tensor([2], [100.0, -100.0]), QuantParams(0.01, 0))
        np.testing.assert_array_equal(q.data, [127, -128])

    @pytest.mark.parametrize("lo, hi", [(-3.0, 7.0), (0.0, 1.0), (-2.0, -0.5), (4.0, 4.0), (0.0, 0.0)])
    def test_round_trip(self, lo, hi):
        qp = ptq.qparams_asym(lo, hi)
        lo_e, hi_e = min(lo, 0.0), max(hi, 0.0)
        x = np.random.default_rng(0).uniform(lo_e, hi_e, size=10_000).astype(np.float32)
        back = ptq.dequantize(ptq.quantize_tensor(FloatTensor(x), qp)).data
        assert np.max(np.abs(back.astype(np.float64) - x)) <= qp.scale / 2

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(0, 1e3))
    def test_round_trip_property(self, lo, width):
        qp = ptq.qparams_asym(lo, lo + width)
        lo_e, hi_e = min(lo, 0.0), max(lo + width, 0.0)
        x = np.linspace(lo_e, hi_e, 101).astype(np.float32)
        x = np.clip(x, lo_e, hi_e)
        q = ptq.quantize_tensor(FloatTensor(x), qp)
        exact = (q.data.astype(np.float64) - qp.zero_point) * qp.scale
        assert np.max(np.abs(exact - x)) <= qp.scale / 2 * (1 + 1e-12)
        # float32 storage of the dequantized value adds at most half an ulp
        back = ptq.dequantize(q).data.astype(np.float64)
        slack = np.spacing(np.abs(back).astype(np.float32)).astype(np.float64) / 2
        assert np.all(np.abs(back - x) <= qp.scale / 2 + slack)


class TestFixedPoint:
    def test_powers_of_two(self):
        assert ptq.fxp_from_real(0.5) == FixedPointMultiplier(2**30, 31)
        assert ptq.fxp_from_real(1.0) == FixedPointMultiplier(2**30, 30)

    def test_reconstruction_error(self):
        for m in [0.0003, 0.1234567, 3.3, 1e-7, 1000.0]:
            f = ptq.fxp_from_real(m)
            assert 2**30 <= f.m0 < 2**31
            assert abs(f.value - m) <= m * 2**-30

    def test_round_up_to_two_pow_31(self):
        m = (2**31 - 0.25) / 2**31  # mantissa rounds up to 2^31
        f = ptq.fxp_from_real(m)
        assert f == FixedPointMultiplier(2**30, 30)

    def test_out_of_range(self):
        with pytest.raises(QuantizationError):
            ptq.fxp_from_real(0.0)
        with pytest.raises(QuantizationError):
            ptq.fxp_from_real(2.0**31)


class TestRequant:
    def test_examples(self):
        assert ptq.requant(100, ptq.fxp_from_real(0.5), 0) == 50
        assert ptq.requant(-3, ptq.fxp_from_real(1.0), 10) == 7

    def test_ties_round_away(self):
        half = ptq.fxp_from_real(0.5)
        assert ptq.requant(3, half, 0) == 2
        assert ptq.requant(-3, half, 0) == -2
        assert ptq.requant(-5, half, 0) == -3

    def test_negative_non_tie(self):
        # -1.25 must round to -1, not floor to -2
        quarter = ptq.fxp_from_real(0.25)
        assert ptq.requant(-5, quarter, 0) == -1

    def test_double_precision_oracle(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(1000):
            acc = int(rng.integers(-2**31 + 1, 2**31))
            m = float(10 ** rng.uniform(-9, 0))
            z = int(rng.integers(-128, 128))
            f = ptq.fxp_from_real(m)
            exact = acc * f.value
            if abs(abs(exact) % 1 - 0.5) < 2**-20:
                continue
            ref = max(-128, min(127, int(ptq.round_half_away(exact)) + z))
            assert ptq.requant(acc, f, z) == ref
            checked += 1
        assert checked > 950

    def test_exact_oracle_including_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(3000):
            f = ptq.fxp_from_real(float(rng.uniform(1e-4, 2.0)))
            z = int(rng.integers(-128, 128))
            acc = int(rng.integers(-3000, 3000))
            assert ptq.requant(acc, f, z) == requant_oracle(acc, f, z)
        # constructed ties
        for n in range(1, 8):
            f = ptq.fxp_from_real(2.0**-n)
            for acc in range(-(2**n) * 3, (2**n) * 3):
                assert ptq.requant(acc, f, 0) == requant_oracle(acc, f, 0)

    def test_array_matches_scalar(self, rng):
        f = ptq.fxp_from_real(0.0123)
        acc = rng.integers(-20000, 20000, size=500)
        got = ptq.requant_array(acc, f, -7)
        np.testing.assert_array_equal(got, [requant_oracle(int(a), f, -7) for a in acc])

    def test_floor_clamp(self):
        f = ptq.fxp_from_real(1.0)
        np.testing.assert_array_equal(ptq.requant_array(np.array([-50, 0, 50]), f, 5, floor=5), [5, 5, 55])


class TestCalibration:
    def test_constant_zero_sample(self, graph):
        stats = ptq.calibrate(graph, [FloatTensor(np.zeros((3, 16, 16)))])
        assert (stats.mins[0], stats.maxs[0]) == (0.0, 0.0)
        acts = nnf.forward_sites(graph, FloatTensor(np.zeros((3, 16, 16))))
        for site in range(stats.num_sites):
            assert stats.mins[site] == acts[site].data.min()
            assert stats.maxs[site] == acts[site].data.max()

    def test_two_samples_fold(self, graph, dataset):
        a, b = dataset[0][0], dataset[1][0]
        sa, sb, sab = ptq.calibrate(graph, [a]), ptq.calibrate(graph, [b]), ptq.calibrate(graph, [a, b])
        assert sab.mins == [min(x, y) for x, y in zip(sa.mins, sb.mins)]
        assert sab.maxs == [max(x, y) for x, y in zip(sa.maxs, sb.maxs)]

    def test_store_then_reduce_oracle(self, graph, calib_samples):
        stats = ptq.calibrate(graph, calib_samples)
        stored = [nnf.forward_sites(graph, x) for x in calib_samples]
        n = len(graph.layers)  # softmax output excluded
        assert stats.num_sites == n
        for site in range(n):
            everything = np.concatenate([acts[site].data.ravel() for acts in stored])
            assert stats.mins[site] == everything.min()
            assert stats.maxs[site] == everything.max()
            assert stats.counts[site] == len(calib_samples)

    def test_errors(self, graph):
        with pytest.raises(QuantizationError):
            ptq.calibrate(graph, [])
        with pytest.raises(ShapeError):
            ptq.calibrate(graph, [FloatTensor(np.zeros((3, 8, 8)))])

    def test_percentile_narrows_range(self, graph, calib_samples):
        full = ptq.calibrate(graph, calib_samples)
        clipped = ptq.calibrate(graph, calib_samples, percentile=99.0)
        for site in range(full.num_sites):
            assert full.mins[site] <= clipped.mins[site] <= clipped.maxs[site] <= full.maxs[site]
        with pytest.raises(QuantizationError):
            ptq.calibrate(graph, calib_samples, percentile=40)


class TestQuantizeModel:
    def test_all_zero_weights(self):
        g = ModelGraph([2], [Dense(np.zeros((2, 2)), np.zeros(2))])
        stats = ptq.calibrate(g, [make_tensor([2], [1.0, -1.0])])
        m = ptq.quantize_model(g, stats)
        assert m.layers[0].w_qparams == QuantParams(1.0, 0)
        assert not m.layers[0].weights.any()

    def test_hand_checked_1x1_conv(self):
        """s_in 0.1, w 0.5 -> q_w 50 at s_w 0.01; M = 0.01; x = 2.0 gives 1.0 exactly."""
        in_qp, out_qp = QuantParams(0.1, 0), QuantParams(0.1, 0)
        w_qp = ptq.qparams_sym(1.27)
        q_w = ptq.quantize_array(np.array([[[[0.5]]]]), w_qp)
        assert q_w[0, 0, 0, 0] == 50
        mult = ptq.fxp_from_real(in_qp.scale * w_qp.scale / out_qp.scale)
        assert mult.value == pytest.approx(0.01, rel=1e-6)  # float32 scales
        layer = QConv2D(q_w, np.zeros(1, np.int32), 1, 0, w_qp, in_qp, out_qp, mult)
        qx = ptq.quantize_tensor(make_tensor([1, 1, 1], [2.0]), in_qp)
        assert qx.data[0, 0, 0] == 20
        out = ptq.qconv2d(qx, layer)
        assert out.data[0, 0, 0] == 10
        assert ptq.dequantize(out).data[0, 0, 0] == pytest.approx(1.0)
        float_out = nnf.conv2d_f(make_tensor([1, 1, 1], [2.0]), Conv2D(np.array([[[[0.5]]]]), np.zeros(1)))
        assert float_out.data[0, 0, 0] == 1.0

    def test_shared_site_params(self, qmodel):
        sites = qmodel.site_params
        # ReLU, MaxPool and Flatten outputs reuse their input's parameters
        assert sites[2] == sites[1] and sites[3] == sites[2]
        assert sites[5] == sites[4] and sites[6] == sites[5] and sites[7] == sites[6]
        assert len(sites) == 9

    def test_trace_matches_float(self, graph, qmodel):
        assert ptq.validate_q(qmodel) == nnf.validate(graph)

    def test_accumulator_bound(self):
        g = ModelGraph([65537], [Dense(np.ones((1, 65537)), np.zeros(1))])
        stats = ptq.calibrate(g, [FloatTensor(np.ones(65537))])
        with pytest.raises(QuantizationError, match="layer 0"):
            ptq.quantize_model(g, stats)

    def test_bias_overflow(self):
        g = ModelGraph([1], [Dense(np.ones((1, 1)), np.array([1e30]))])
        stats = ptq.calibrate(g, [FloatTensor(np.ones(1))])
        with pytest.raises(QuantizationError, match="bias"):
            ptq.quantize_model(g, stats)

    def test_missing_stats(self, graph, calib_samples):
        stats = ptq.calibrate(graph, calib_samples[:1])
        stats.counts[3] = 0
        with pytest.raises(QuantizationError, match="sites"):
            ptq.quantize_model(graph, stats)


class TestIntegerKernels:
    def test_qconv_random_against_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            layer, qx = random_qconv(rng)
            acc = qconv_oracle(qx.data, qx.qparams.zero_point, layer.weights, layer.bias,
                               layer.stride, layer.padding)
            z = layer.out_qparams.zero_point
            expected = np.vectorize(lambda a: requant_oracle(int(a), layer.multiplier, z))(acc)
            out = ptq.qconv2d(qx, layer)
            np.testing.assert_array_equal(out.data, expected)
            assert out.qparams == layer.out_qparams

    def test_qdense_random_against_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            n_in, n_out = int(rng.integers(1, 64)), int(rng.integers(1, 8))
            in_qp, out_qp = random_qparams(rng), random_qparams(rng)
            w_qp = QuantParams(0.01, 0)
            layer = QDense(rng.integers(-127, 128, size=(n_out, n_in)).astype(np.int8),
                           rng.integers(-5000, 5000, size=n_out).astype(np.int32),
                           w_qp, in_qp, out_qp, ptq.fxp_from_real(in_qp.scale * w_qp.scale / out_qp.scale))
            qx = QuantTensor(rng.integers(-128, 128, size=n_in).astype(np.int8), in_qp)
            z_in = in_qp.zero_point
            expected = [
                requant_oracle(int(layer.bias[o]) + sum((int(qx.data[i]) - z_in) * int(layer.weights[o, i])
                                                        for i in range(n_in)),
                               layer.multiplier, out_qp.zero_point)
                for o in range(n_out)
            ]
            np.testing.assert_array_equal(ptq.qdense(qx, layer).data, expected)

    def test_zero_input_gives_output_zero_point(self):
        rng = np.random.default_rng(3)
        layer, qx = random_qconv(rng)
        layer = QConv2D(layer.weights, np.zeros_like(layer.bias), layer.stride, layer.padding,
                        layer.w_qparams, layer.in_qparams, layer.out_qparams, layer.multiplier)
        flat = QuantTensor(np.full(qx.shape, qx.qparams.zero_point, np.int8), qx.qparams)
        assert np.all(ptq.qconv2d(flat, layer).data == layer.out_qparams.zero_point)

    def test_qparams_mismatch(self):
        layer, qx = random_qconv(np.random.default_rng(4))
        wrong = QuantTensor(qx.data, QuantParams(qx.qparams.scale * 2, qx.qparams.zero_point))
        with pytest.raises(QuantizationError):
            ptq.qconv2d(wrong, layer)

    def test_qrelu_and_qmaxpool(self):
        qp = QuantParams(0.1, -10)
        np.testing.assert_array_equal(ptq.qrelu(QuantTensor(np.array([-20, -10, 5]), qp)).data, [-10, -10, 5])
        pooled = ptq.qmaxpool(QuantTensor(np.array([[[1, 2], [3, 4]]]), qp), MaxPool2D(2, 2, 2))
        np.testing.assert_array_equal(pooled.data, [[[4]]])
        assert pooled.qparams == qp

    def test_qrelu_matches_float_relu(self, rng):
        qp = QuantParams(0.05, -20)
        q = QuantTensor(rng.integers(-128, 128, size=200).astype(np.int8), qp)
        via_int = ptq.dequantize(ptq.qrelu(q)).data
        via_float = nnf.relu_f(ptq.dequantize(q)).data
        np.testing.assert_array_equal(via_int, via_float)


class TestForwardQ:
    def test_agreement(self, graph, qmodel, dataset):
        agree = [np.argmax(ptq.forward_q(qmodel, x).data) == np.argmax(nnf.forward_f(graph, x).data)
                 for x, _ in dataset]
        assert np.mean(agree) >= 0.99

    def test_probabilities(self, qmodel, dataset):
        p = ptq.forward_q(qmodel, dataset[0][0]).data
        assert abs(float(p.sum()) - 1) <= 1e-6

    def test_deterministic(self, qmodel, dataset):
        x = dataset[5][0]
        assert ptq.forward_q(qmodel, x).data.tobytes() == ptq.forward_q(qmodel, x).data.tobytes()

    def test_without_softmax(self, rng):
        g = ModelGraph([4], [Dense(rng.standard_normal((3, 4)), np.zeros(3)), ReLU()])
        xs = [FloatTensor(rng.standard_normal(4)) for _ in range(8)]
        m = ptq.quantize_model(g, ptq.calibrate(g, xs))
        out = ptq.forward_q(m, xs[0]).data
        ref = nnf.forward_f(g, xs[0]).data
        # input, weight and output rounding each contribute; a few output steps covers them
        np.testing.assert_allclose(out, ref, atol=4 * m.site_params[-1].scale)
        assert np.all(out >= 0)
