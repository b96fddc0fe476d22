"""Binary model (``AICM``) and tensor (``ATNS``) files.

All integers and floats are little-endian. Both formats end in a CRC-32
(zlib polynomial) over every preceding byte.

AICM, version 1::

    magic   b"AICM"
    u32     version (= 1)
    u8      kind: 0 float graph, 1 quantized model
    u32     input rank, then u32 per input dim
    u32     label count, then per label: u32 byte length + UTF-8 bytes
    [kind 1] u32 site count, then per site: f32 scale, i32 zero_point
    u32     layer count, then per layer: u8 tag + body (below)
    u32     CRC-32

Layer bodies (``qp`` = f32 scale + i32 zero_point)::

    1 Conv2D    u32 in_ch, out_ch, kh, kw, stride, padding
                float: f32 weights[out*in*kh*kw], f32 bias[out]
                quant: i8 weights, qp weights, i32 bias[out], qp in, qp out, i32 m0, u32 shift
    2 ReLU      (empty)
    3 MaxPool2D u32 kh, kw, stride
    4 Flatten   (empty)
    5 Dense     u32 in_features, out_features
                float: f32 weights[out*in], f32 bias[out]
                quant: as Conv2D after the dims
    6 Softmax   (empty)

ATNS::

    magic   b"ATNS"
    u8      dtype: 0 float32, 1 int8
    u8      rank, then u32 per dim
    [dtype 1] f32 scale, i32 zero_point
    payload, row-major
    u32     CRC-32

Loading checks, in order: magic, minimum length, CRC, version, structure.
Checking the CRC before anything that reads a size field means any
single-byte corruption past the magic surfaces as :class:`ChecksumError`.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from typing import Union

import numpy as np

from ..errors import BadMagicError, ChecksumError, FormatError, TinyQError, TruncatedError, UnsupportedVersionError
from ..nnf import Conv2D, Dense, Flatten, MaxPool2D, ModelGraph, ReLU, Softmax
from ..ptq import FixedPointMultiplier, QConv2D, QDense, QuantModel
from ..tensor import FloatTensor, QuantParams, QuantTensor, Shape

MODEL_MAGIC = b"AICM"
TENSOR_MAGIC = b"ATNS"
VERSION = 1
KIND_FLOAT, KIND_QUANT = 0, 1
TAG_CONV, TAG_RELU, TAG_POOL, TAG_FLATTEN, TAG_DENSE, TAG_SOFTMAX = range(1, 7)
DTYPE_F32, DTYPE_I8 = 0, 1

Model = Union[ModelGraph, QuantModel]


# --------------------------------------------------------------------------
# low-level writer / reader


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def array(self, arr: np.ndarray, dtype: str):
        self.buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def qparams(self, qp: QuantParams):
        self.pack("fi", qp.scale, qp.zero_point)

    def finish(self) -> bytes:
        body = self.buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"{self.source}: payload ends early at byte {self.pos} (needs {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values if len(values) > 1 else values[0]

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype)).reshape(shape)

    def qparams(self) -> QuantParams:
        scale, zp = self.unpack("fi")
        return QuantParams(scale, zp)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.source}: {len(self.data) - self.pos} unexpected trailing bytes")


def _check_envelope(data: bytes, magic: bytes, min_len: int, source: str) -> bytes:
    """Validate magic and CRC; return the body without the CRC."""
    if not magic.startswith(data[:4]) or (len(data) >= 4 and data[:4] != magic):
        raise BadMagicError(f"{source}: bad magic {data[:4]!r}, expected {magic!r}")
    if len(data) < min_len:
        raise TruncatedError(f"{source}: {len(data)} bytes is shorter than the {min_len}-byte minimum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    actual = zlib.crc32(body)
    if actual != crc:
        raise ChecksumError(f"{source}: CRC mismatch (stored {crc:#010x}, computed {actual:#010x})")
    return body


# --------------------------------------------------------------------------
# models


def _write_weighted(w: _Writer, layer, quant: bool):
    if isinstance(layer, (Conv2D, QConv2D)):
        w.pack("B", TAG_CONV)
        w.pack("6I", layer.in_ch, layer.out_ch, layer.kh, layer.kw, layer.stride, layer.padding)
    else:
        w.pack("B", TAG_DENSE)
        w.pack("2I", layer.in_features, layer.out_features)
    if quant:
        w.array(layer.weights, "i1")
        w.qparams(layer.w_qparams)
        w.array(layer.bias, "i4")
        w.qparams(layer.in_qparams)
        w.qparams(layer.out_qparams)
        w.pack("iI", layer.multiplier.m0, layer.multiplier.shift)
    else:
        w.array(layer.weights.data, "f4")
        w.array(layer.bias.data, "f4")


def serialize_model(m: Model) -> bytes:
    quant = isinstance(m, QuantModel)
    w = _Writer()
    w.buf.write(MODEL_MAGIC)
    w.pack("IB", VERSION, KIND_QUANT if quant else KIND_FLOAT)
    w.pack("I", m.input_shape.rank)
    w.pack(f"{m.input_shape.rank}I", *m.input_shape)
    w.pack("I", len(m.class_labels))
    for label in m.class_labels:
        raw = label.encode("utf-8")
        w.pack("I", len(raw))
        w.buf.write(raw)
    if quant:
        w.pack("I", len(m.site_params))
        for qp in m.site_params:
            w.qparams(qp)
    w.pack("I", len(m.layers))
    for layer in m.layers:
        if isinstance(layer, (Conv2D, Dense, QConv2D, QDense)):
            if quant != isinstance(layer, (QConv2D, QDense)):
                raise FormatError(f"{type(layer).__name__} does not belong in a {'quantized' if quant else 'float'} model")
            _write_weighted(w, layer, quant)
        elif isinstance(layer, ReLU):
            w.pack("B", TAG_RELU)
        elif isinstance(layer, MaxPool2D):
            w.pack("B", TAG_POOL)
            w.pack("3I", layer.kh, layer.kw, layer.stride)
        elif isinstance(layer, Flatten):
            w.pack("B", TAG_FLATTEN)
        elif isinstance(layer, Softmax):
            w.pack("B", TAG_SOFTMAX)
        else:
            raise FormatError(f"cannot serialize layer {type(layer).__name__}")
    return w.finish()


def _read_weighted(r: _Reader, tag: int, quant: bool):
    if tag == TAG_CONV:
        in_ch, out_ch, kh, kw, stride, padding = r.unpack("6I")
        wshape = (out_ch, in_ch, kh, kw)
    else:
        in_f, out_f = r.unpack("2I")
        wshape = (out_f, in_f)
    out_units = wshape[0]
    if not quant:
        weights = r.array("f4", wshape)
        bias = r.array("f4", (out_units,))
        if tag == TAG_CONV:
            return Conv2D(weights, bias, stride, padding)
        return Dense(weights, bias)
    weights = r.array("i1", wshape)
    w_qp = r.qparams()
    bias = r.array("i4", (out_units,))
    in_qp, out_qp = r.qparams(), r.qparams()
    m0, shift = r.unpack("iI")
    for arr in (weights, bias):
        arr.flags.writeable = False
    common = dict(weights=weights, bias=bias, w_qparams=w_qp, in_qparams=in_qp,
                  out_qparams=out_qp, multiplier=FixedPointMultiplier(m0, shift))
    if tag == TAG_CONV:
        return QConv2D(stride=stride, padding=padding, **common)
    return QDense(**common)


def parse_model(data: bytes, source: str = "<bytes>") -> Model:
    body = _check_envelope(data, MODEL_MAGIC, 4 + 4 + 1 + 4 + 4 + 4 + 4, source)
    r = _Reader(body, source)
    r.take(4)
    version, kind = r.unpack("IB")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported AICM version {version}")
    if kind not in (KIND_FLOAT, KIND_QUANT):
        raise FormatError(f"{source}: unknown model kind {kind}")
    quant = kind == KIND_QUANT
    try:
        rank = r.unpack("I")
        if rank > 4:
            raise FormatError(f"{source}: input rank {rank} exceeds 4")
        dims = r.unpack(f"{rank}I") if rank else ()
        dims = (dims,) if isinstance(dims, int) else dims
        labels = []
        for _ in range(r.unpack("I")):
            labels.append(r.take(r.unpack("I")).decode("utf-8"))
        sites = []
        if quant:
            sites = [r.qparams() for _ in range(r.unpack("I"))]
        layers = []
        for _ in range(r.unpack("I")):
            tag = r.unpack("B")
            if tag in (TAG_CONV, TAG_DENSE):
                layers.append(_read_weighted(r, tag, quant))
            elif tag == TAG_RELU:
                layers.append(ReLU())
            elif tag == TAG_POOL:
                layers.append(MaxPool2D(*r.unpack("3I")))
            elif tag == TAG_FLATTEN:
                layers.append(Flatten())
            elif tag == TAG_SOFTMAX:
                layers.append(Softmax())
            else:
                raise FormatError(f"{source}: unknown layer tag {tag}")
        r.done()
        if quant:
            return QuantModel(Shape(dims), layers, sites, labels)
        return ModelGraph(Shape(dims), layers, labels)
    except (FormatError, TruncatedError):
        raise
    except (TinyQError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: invalid model contents: {exc}") from exc


def save_model(m: Model, path) -> int:
    data = serialize_model(m)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_model(data, os.fspath(path))


def serialized_size(m: Model) -> int:
    return len(serialize_model(m))


def same_architecture(g: ModelGraph, m: QuantModel) -> bool:
    """True when ``m`` is a quantization of a graph shaped like ``g``."""
    if tuple(g.input_shape) != tuple(m.input_shape) or len(g.layers) != len(m.layers):
        return False
    for a, b in zip(g.layers, m.layers):
        if isinstance(a, Conv2D):
            if not isinstance(b, QConv2D) or a.weights.data.shape != b.weights.shape:
                return False
            if (a.stride, a.padding) != (b.stride, b.padding):
                return False
        elif isinstance(a, Dense):
            if not isinstance(b, QDense) or a.weights.data.shape != b.weights.shape:
                return False
        elif a != b:
            return False
    return True


def size_ratio(float_m: ModelGraph, quant_m: QuantModel) -> float:
    if not isinstance(float_m, ModelGraph) or not isinstance(quant_m, QuantModel):
        raise FormatError("size_ratio needs a float graph and a quantized model")
    if not same_architecture(float_m, quant_m):
        raise FormatError("float and quantized models have different architectures")
    return serialized_size(float_m) / serialized_size(quant_m)


# --------------------------------------------------------------------------
# tensors


def serialize_tensor(t: Union[FloatTensor, QuantTensor]) -> bytes:
    w = _Writer()
    w.buf.write(TENSOR_MAGIC)
    quant = isinstance(t, QuantTensor)
    w.pack("BB", DTYPE_I8 if quant else DTYPE_F32, t.shape.rank)
    w.pack(f"{t.shape.rank}I", *t.shape)
    if quant:
        w.qparams(t.qparams)
        w.array(t.data, "i1")
    else:
        w.array(t.data, "f4")
    return w.finish()


def parse_tensor(data: bytes, source: str = "<bytes>") -> Union[FloatTensor, QuantTensor]:
    body = _check_envelope(data, TENSOR_MAGIC, 4 + 2 + 4 + 4, source)
    r = _Reader(body, source)
    r.take(4)
    dtype, rank = r.unpack("BB")
    if dtype not in (DTYPE_F32, DTYPE_I8):
        raise FormatError(f"{source}: unknown tensor dtype {dtype}")
    try:
        dims = r.unpack(f"{rank}I") if rank else ()
        dims = (dims,) if isinstance(dims, int) else dims
        shape = Shape(dims)
        if dtype == DTYPE_I8:
            qp = r.qparams()
            out = QuantTensor(r.array("i1", shape), qp)
        else:
            out = FloatTensor(r.array("f4", shape))
        r.done()
        return out
    except (FormatError, TruncatedError):
        raise
    except TinyQError as exc:
        raise FormatError(f"{source}: invalid tensor contents: {exc}") from exc


def save_tensor(t: Union[FloatTensor, QuantTensor], path) -> int:
    data = serialize_tensor(t)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_tensor(path) -> Union[FloatTensor, QuantTensor]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_tensor(data, os.fspath(path))
