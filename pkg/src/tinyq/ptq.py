"""Post-training INT8 quantization and integer-only inference kernels.

Scheme:

* weights: per-tensor symmetric int8 (zero point 0, scale = absmax / 127)
* activations: per-tensor asymmetric int8, range always widened to include 0
* biases: int32 in the accumulator scale ``s_in * s_w``
* requantization: fixed-point multiplier ``m0 * 2**-shift`` applied with
  64-bit intermediates, rounding half away from zero
* softmax stays in float on the dequantized logits

ReLU, max-pool and flatten reuse their input's quantization parameters, which
makes them exact in the integer domain.

All real-valued parameter arithmetic is done in float64 on float32-stored
operands. Kernels accumulate through float64 BLAS: every product and partial
sum is an integer below 2**53, so the result is exact and independent of
summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nnf
from .errors import QuantizationError, ShapeError
from .nnf import Conv2D, Dense, Flatten, MaxPool2D, ModelGraph, ReLU, Softmax
from .tensor import QMAX, QMIN, FloatTensor, QuantParams, QuantTensor, Shape

MAX_MACS = 65536
# |q_in - z_in| <= 255 and |q_w| <= 127
MAX_PRODUCT = 255 * 127
INT32_MAX = 2**31 - 1
HIST_BINS = 2048
FLOAT32_TINY = float(np.finfo(np.float32).tiny)


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Exact for all float64 inputs."""
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole
    out = whole + np.sign(frac) * (np.abs(frac) >= 0.5)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationStats:
    """Running per-site ranges. Site 0 is the model input; site i+1 is layer i's output."""

    mins: list
    maxs: list
    counts: list

    @property
    def num_sites(self) -> int:
        return len(self.mins)

    def observe(self, site: int, lo: float, hi: float):
        if self.counts[site] == 0:
            self.mins[site], self.maxs[site] = lo, hi
        else:
            self.mins[site] = min(self.mins[site], lo)
            self.maxs[site] = max(self.maxs[site], hi)
        self.counts[site] += 1


def num_sites(g: ModelGraph) -> int:
    """Activation sites that carry quantization parameters (softmax output excluded)."""
    n = len(g.layers) + 1
    if g.layers and isinstance(g.layers[-1], Softmax):
        n -= 1
    return n


def calibrate(g: ModelGraph, samples: Sequence[FloatTensor], percentile: Optional[float] = None) -> CalibrationStats:
    """Fold activation ranges of every site over the calibration samples.

    With ``percentile`` set (in (50, 100]), each site's range is clipped to the
    ``100 - p`` and ``p`` percentiles of a 2048-bin histogram spanning the raw
    min/max. Off by default.
    """
    if len(samples) == 0:
        raise QuantizationError("calibration needs at least one sample")
    nnf.validate(g)
    n = num_sites(g)
    stats = CalibrationStats([0.0] * n, [0.0] * n, [0] * n)
    for x in samples:
        if tuple(x.shape) != tuple(g.input_shape):
            raise ShapeError(f"calibration sample shape {list(x.shape)} != model input {list(g.input_shape)}")
        acts = nnf.forward_sites(g, x)
        for site in range(n):
            a = acts[site].data
            stats.observe(site, float(a.min()), float(a.max()))
    if percentile is not None:
        _clip_percentile(g, samples, stats, percentile)
    return stats


def _clip_percentile(g, samples, stats, p):
    if not 50 < p <= 100:
        raise QuantizationError(f"percentile must lie in (50, 100], got {p}")
    n = stats.num_sites
    hists = [np.zeros(HIST_BINS, np.int64) for _ in range(n)]
    for x in samples:
        acts = nnf.forward_sites(g, x)
        for site in range(n):
            if stats.maxs[site] > stats.mins[site]:
                h, _ = np.histogram(acts[site].data, HIST_BINS, (stats.mins[site], stats.maxs[site]))
                hists[site] += h
    for site in range(n):
        lo, hi = stats.mins[site], stats.maxs[site]
        if hi <= lo:
            continue
        edges = np.linspace(lo, hi, HIST_BINS + 1)
        cdf = np.cumsum(hists[site]) / hists[site].sum()
        lo_bin = int(np.searchsorted(cdf, (100 - p) / 100, side="left"))
        hi_bin = int(np.searchsorted(cdf, p / 100, side="left"))
        stats.mins[site] = float(edges[lo_bin])
        stats.maxs[site] = float(edges[min(hi_bin + 1, HIST_BINS)])


# --------------------------------------------------------------------------
# parameters


def qparams_asym(lo: float, hi: float) -> QuantParams:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise QuantizationError(f"non-finite range ({lo}, {hi})")
    if lo > hi:
        raise QuantizationError(f"min {lo} > max {hi}")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = float(np.float32((hi - lo) / 255.0))
    if scale < FLOAT32_TINY:
        # empty range, or one too narrow for a normal float32 scale: degenerate rule
        return QuantParams(1.0, 0)
    zp = int(round_half_away(-128.0 - lo / scale))
    return QuantParams(scale, min(max(zp, QMIN), QMAX))


def qparams_sym(absmax: float) -> QuantParams:
    if not math.isfinite(absmax) or absmax < 0:
        raise QuantizationError(f"absmax must be finite and >= 0, got {absmax}")
    scale = float(np.float32(absmax / 127.0))
    if scale < FLOAT32_TINY:
        return QuantParams(1.0, 0)
    return QuantParams(scale, 0)


def quantize_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def quantize_tensor(x: FloatTensor, qp: QuantParams) -> QuantTensor:
    return QuantTensor(quantize_array(x.data, qp), qp)


def dequantize(q: QuantTensor) -> FloatTensor:
    qp = q.qparams
    return FloatTensor(((q.data.astype(np.float64) - qp.zero_point) * qp.scale).astype(np.float32))


@dataclass(frozen=True)
class FixedPointMultiplier:
    """Real multiplier represented as ``m0 * 2**-shift`` with m0 in [2**30, 2**31)."""

    m0: int
    shift: int

    def __post_init__(self):
        if not 2**30 <= self.m0 < 2**31:
            raise QuantizationError(f"m0 {self.m0} outside [2^30, 2^31)")
        if self.shift < 0:
            raise QuantizationError(f"negative shift {self.shift}")

    @property
    def value(self) -> float:
        return math.ldexp(self.m0, -self.shift)


def fxp_from_real(multiplier: float) -> FixedPointMultiplier:
    if not 2.0**-31 < multiplier < 2.0**31:
        raise QuantizationError(f"multiplier {multiplier} outside (2^-31, 2^31)")
    mant, exp = math.frexp(multiplier)  # multiplier = mant * 2**exp, mant in [0.5, 1)
    shift = 31 - exp
    m0 = int(round_half_away(math.ldexp(mant, 31)))
    if m0 == 2**31:
        m0 //= 2
        shift -= 1
    return FixedPointMultiplier(m0, shift)


def requant_array(acc: np.ndarray, f: FixedPointMultiplier, z_out: int, floor: int = QMIN) -> np.ndarray:
    """Vectorised :func:`requant` over an accumulator array.

    ``floor`` raises the lower clamp bound; ``floor=z_out`` fuses a following ReLU.
    """
    r = np.asarray(acc, dtype=np.int64) * np.int64(f.m0)
    n = f.shift
    if n:
        # (t + half - [t < 0]) >> n rounds half away from zero; |t| < 2**62 leaves headroom
        neg = r >> np.int64(63)
        r += np.int64(1 << (n - 1))
        r += neg
        r >>= np.int64(n)
    r += z_out
    np.maximum(r, floor, out=r)
    np.minimum(r, QMAX, out=r)
    return r.astype(np.int8)


def requant(acc: int, f: FixedPointMultiplier, z_out: int) -> int:
    """Scale a 32-bit accumulator to int8: clamp(round_half_away(acc * M) + z_out)."""
    return int(requant_array(np.array([acc], dtype=np.int64), f, z_out)[0])


# --------------------------------------------------------------------------
# quantized model


@dataclass(frozen=True, eq=False)
class QConv2D:
    weights: np.ndarray  # int8 [out_ch, in_ch, kh, kw]
    bias: np.ndarray  # int32 [out_ch]
    stride: int
    padding: int
    w_qparams: QuantParams
    in_qparams: QuantParams
    out_qparams: QuantParams
    multiplier: FixedPointMultiplier

    def __post_init__(self):
        object.__setattr__(self, "_w64", self.weights.astype(np.float64))
        object.__setattr__(self, "_b64", self.bias.astype(np.float64))

    out_ch = property(lambda self: self.weights.shape[0])
    in_ch = property(lambda self: self.weights.shape[1])
    kh = property(lambda self: self.weights.shape[2])
    kw = property(lambda self: self.weights.shape[3])


@dataclass(frozen=True, eq=False)
class QDense:
    weights: np.ndarray  # int8 [out_features, in_features]
    bias: np.ndarray  # int32 [out_features]
    w_qparams: QuantParams
    in_qparams: QuantParams
    out_qparams: QuantParams
    multiplier: FixedPointMultiplier

    def __post_init__(self):
        object.__setattr__(self, "_w64", self.weights.astype(np.float64))
        object.__setattr__(self, "_b64", self.bias.astype(np.float64))

    out_features = property(lambda self: self.weights.shape[0])
    in_features = property(lambda self: self.weights.shape[1])


@dataclass(frozen=True, eq=False)
class QuantModel:
    input_shape: Shape
    layers: tuple
    site_params: tuple  # QuantParams per activation site
    class_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", Shape(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "site_params", tuple(self.site_params))
        object.__setattr__(self, "class_labels", tuple(self.class_labels))

    @property
    def ends_in_softmax(self) -> bool:
        return bool(self.layers) and isinstance(self.layers[-1], Softmax)


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, order="C")
    arr.flags.writeable = False
    return arr


def _check_accumulator(macs: int, bias_q: np.ndarray, index: int):
    if macs > MAX_MACS:
        raise QuantizationError(f"layer {index}: {macs} MACs per output exceeds accumulator bound {MAX_MACS}")
    if bias_q.size and np.abs(bias_q).max() > INT32_MAX:
        raise QuantizationError(f"layer {index}: bias does not fit in int32")
    worst = macs * MAX_PRODUCT + (int(np.abs(bias_q).max()) if bias_q.size else 0)
    if worst > INT32_MAX:
        raise QuantizationError(f"layer {index}: int32 bias overflows the accumulator (worst case {worst})")


def _quantize_weighted(layer, in_qp: QuantParams, out_qp: QuantParams, index: int):
    w = layer.weights.data
    macs = int(np.prod(w.shape[1:]))
    w_qp = qparams_sym(float(np.abs(w).max()))
    w_q = quantize_array(w, w_qp)
    acc_scale = in_qp.scale * w_qp.scale
    bias_q = round_half_away(layer.bias.data.astype(np.float64) / acc_scale)
    _check_accumulator(macs, bias_q, index)
    mult = fxp_from_real(acc_scale / out_qp.scale)
    common = dict(
        weights=_frozen(w_q, np.int8),
        bias=_frozen(bias_q, np.int32),
        w_qparams=w_qp,
        in_qparams=in_qp,
        out_qparams=out_qp,
        multiplier=mult,
    )
    if isinstance(layer, Conv2D):
        return QConv2D(stride=layer.stride, padding=layer.padding, **common)
    return QDense(**common)


def quantize_model(g: ModelGraph, stats: CalibrationStats) -> QuantModel:
    """Convert a calibrated float graph to its integer form."""
    nnf.validate(g)
    n = num_sites(g)
    if stats.num_sites < n or any(c < 1 for c in stats.counts[:n]):
        missing = [i for i in range(n) if i >= stats.num_sites or stats.counts[i] < 1]
        raise QuantizationError(f"missing calibration stats for sites {missing}")
    sites = [qparams_asym(stats.mins[0], stats.maxs[0])]
    layers = []
    for i, layer in enumerate(g.layers):
        in_qp = sites[i] if i < len(sites) else None
        if isinstance(layer, (Conv2D, Dense)):
            out_qp = qparams_asym(stats.mins[i + 1], stats.maxs[i + 1])
            layers.append(_quantize_weighted(layer, in_qp, out_qp, i))
            sites.append(out_qp)
        elif isinstance(layer, (ReLU, MaxPool2D, Flatten)):
            layers.append(layer)
            sites.append(in_qp)
        elif isinstance(layer, Softmax):
            layers.append(layer)
        else:
            raise QuantizationError(f"layer {i}: cannot quantize {type(layer).__name__}")
    return QuantModel(g.input_shape, layers, sites, g.class_labels)


def checked_trace(m: QuantModel) -> list[Shape]:
    """:func:`validate_q`, computed once per model."""
    trace = m.__dict__.get("_trace")
    if trace is None:
        trace = validate_q(m)
        object.__setattr__(m, "_trace", trace)
    return trace


def validate_q(m: QuantModel) -> list[Shape]:
    """Shape trace of a quantized model, one entry per layer."""
    trace = []
    shape = m.input_shape
    for i, layer in enumerate(m.layers):
        if isinstance(layer, QConv2D):
            if shape.rank != 3 or shape[0] != layer.in_ch:
                raise ShapeError(f"QConv2D expects [{layer.in_ch}, H, W], got {list(shape)}", i)
            shape = Shape((
                layer.out_ch,
                nnf._conv_out(shape[1], layer.kh, layer.stride, layer.padding),
                nnf._conv_out(shape[2], layer.kw, layer.stride, layer.padding),
            ))
        elif isinstance(layer, QDense):
            if shape.rank != 1 or shape[0] != layer.in_features:
                raise ShapeError(f"QDense expects [{layer.in_features}], got {list(shape)}", i)
            shape = Shape((layer.out_features,))
        else:
            shape = nnf.layer_output_shape(layer, shape, i)
        trace.append(shape)
    return trace


# --------------------------------------------------------------------------
# integer kernels


def _check_input(qx: QuantTensor, qlayer):
    if qx.qparams != qlayer.in_qparams:
        raise QuantizationError(
            f"input qparams {qx.qparams} do not match the layer's calibrated input {qlayer.in_qparams}"
        )


def conv_windows(qx: QuantTensor, ql: QConv2D) -> np.ndarray:
    """Zero-point-centred receptive fields; padding contributes real zero."""
    _check_input(qx, ql)
    if qx.shape.rank != 3 or qx.shape[0] != ql.in_ch:
        raise ShapeError(f"QConv2D expects [{ql.in_ch}, H, W], got {list(qx.shape)}")
    c, h, w = qx.shape
    p = ql.padding
    centred = np.zeros((c, h + 2 * p, w + 2 * p))
    np.subtract(qx.data, qx.qparams.zero_point, out=centred[:, p:p + h, p:p + w], dtype=np.float64)
    return nnf.windows(centred, ql.kh, ql.kw, ql.stride, 0)


def _assert_acc(acc: np.ndarray):
    if __debug__:
        assert np.abs(acc).max(initial=0) <= INT32_MAX, "accumulator overflow"


def conv_acc(win: np.ndarray, ql: QConv2D, lo: int, hi: int) -> np.ndarray:
    """Accumulators (bias included) for output channels [lo, hi).

    float64 sums of int8 products stay exact integers: the accumulator bound
    checked at quantization time keeps every partial sum far below 2**53.
    """
    acc = np.tensordot(ql._w64[lo:hi], win, axes=([1, 2, 3], [0, 3, 4]))
    acc += ql._b64[lo:hi, None, None]
    return acc


def conv_block(win: np.ndarray, ql: QConv2D, lo: int, hi: int, pools=(), floor: int = QMIN) -> np.ndarray:
    """int8 outputs for output channels [lo, hi).

    ``pools`` are MaxPool2D layers applied to the accumulators before requantization.
    Requantization is monotone, so pooling first gives the same int8 result on fewer values.
    """
    acc = conv_acc(win, ql, lo, hi)
    for p in pools:
        acc = nnf.pool_max(acc, p.kh, p.kw, p.stride)
    return requant_array(acc, ql.multiplier, ql.out_qparams.zero_point, floor)


def dense_input(qx: QuantTensor, ql: QDense) -> np.ndarray:
    _check_input(qx, ql)
    if qx.shape.rank != 1 or qx.shape[0] != ql.in_features:
        raise ShapeError(f"QDense expects [{ql.in_features}], got {list(qx.shape)}")
    return qx.data.astype(np.float64) - qx.qparams.zero_point


def dense_acc(xs: np.ndarray, ql: QDense, lo: int, hi: int) -> np.ndarray:
    acc = ql._w64[lo:hi] @ xs
    acc += ql._b64[lo:hi]
    return acc


def dense_block(xs: np.ndarray, ql: QDense, lo: int, hi: int, floor: int = QMIN) -> np.ndarray:
    return requant_array(dense_acc(xs, ql, lo, hi), ql.multiplier, ql.out_qparams.zero_point, floor)


def qconv2d(qx: QuantTensor, ql: QConv2D) -> QuantTensor:
    """Reference integer convolution, one layer at a time, with the overflow assertion."""
    acc = conv_acc(conv_windows(qx, ql), ql, 0, ql.out_ch)
    _assert_acc(acc)
    return QuantTensor(requant_array(acc, ql.multiplier, ql.out_qparams.zero_point), ql.out_qparams)


def qdense(qx: QuantTensor, ql: QDense) -> QuantTensor:
    acc = dense_acc(dense_input(qx, ql), ql, 0, ql.out_features)
    _assert_acc(acc)
    return QuantTensor(requant_array(acc, ql.multiplier, ql.out_qparams.zero_point), ql.out_qparams)


def qrelu(qx: QuantTensor) -> QuantTensor:
    return QuantTensor(np.maximum(qx.data, np.int8(qx.qparams.zero_point)), qx.qparams)


def qmaxpool(qx: QuantTensor, layer: MaxPool2D) -> QuantTensor:
    nnf.layer_output_shape(layer, qx.shape)
    return QuantTensor(nnf.pool_max(qx.data, layer.kh, layer.kw, layer.stride), qx.qparams)


def qflatten(qx: QuantTensor) -> QuantTensor:
    return QuantTensor(qx.data.reshape(-1), qx.qparams)


def apply_layer_q(layer, qx: QuantTensor) -> QuantTensor:
    if isinstance(layer, QConv2D):
        return qconv2d(qx, layer)
    if isinstance(layer, QDense):
        return qdense(qx, layer)
    if isinstance(layer, ReLU):
        return qrelu(qx)
    if isinstance(layer, MaxPool2D):
        return qmaxpool(qx, layer)
    if isinstance(layer, Flatten):
        return qflatten(qx)
    raise QuantizationError(f"no integer kernel for {type(layer).__name__}")


def finish(m: QuantModel, qx: QuantTensor) -> FloatTensor:
    """Dequantize the integer output and apply the float softmax tail if present."""
    out = dequantize(qx)
    return nnf.softmax_f(out) if m.ends_in_softmax else out


def forward_q(m: QuantModel, x: FloatTensor) -> FloatTensor:
    """Quantize the input, run the integer layers, dequantize the result."""
    if tuple(x.shape) != tuple(m.input_shape):
        raise ShapeError(f"input shape {list(x.shape)} != model input {list(m.input_shape)}")
    checked_trace(m)
    qx = quantize_tensor(x, m.site_params[0])
    body = m.layers[:-1] if m.ends_in_softmax else m.layers
    for i, layer in enumerate(body):
        try:
            qx = apply_layer_q(layer, qx)
        except ShapeError as exc:
            raise ShapeError(str(exc), i) from exc
    return finish(m, qx)
