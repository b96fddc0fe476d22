"""Binary PPM (P6, maxval 255) ingestion and bilinear resizing."""

from __future__ import annotations

import os
import re

import numpy as np

from ..errors import FormatError, TruncatedError
from ..nnf import pixels_to_unit
from ..tensor import FloatTensor, Shape

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int, source: str):
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise TruncatedError(f"{source}: PPM header ends early")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def parse_ppm(data: bytes, source: str = "<bytes>") -> FloatTensor:
    """Decode a P6 image into a channel-planar [3, H, W] tensor in [0, 1]."""
    if data[:2] != b"P6":
        raise FormatError(f"{source}: unsupported image format {data[:2]!r}; only binary PPM (P6) is read")
    tokens, pos = _header_tokens(data, 4, source)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{source}: malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{source}: maxval {maxval} unsupported, expected 255")
    if width < 1 or height < 1:
        raise FormatError(f"{source}: invalid size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedError(f"{source}: missing pixel data")
    pixels = data[pos + 1:]
    need = 3 * width * height
    if len(pixels) < need:
        raise TruncatedError(f"{source}: pixel data truncated ({len(pixels)} of {need} bytes)")
    arr = np.frombuffer(pixels[:need], np.uint8).reshape(height, width, 3).transpose(2, 0, 1)
    return FloatTensor(pixels_to_unit(arr))


def load_ppm(path) -> FloatTensor:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read(), os.fspath(path))


def to_pixels(img) -> np.ndarray:
    """[3, H, W] intensities in [0, 1] -> uint8 [3, H, W]."""
    data = img.data if isinstance(img, FloatTensor) else np.asarray(img)
    if data.dtype == np.uint8:
        return data
    return np.round(np.clip(data.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(img, path):
    pixels = to_pixels(img)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise FormatError(f"expected a [3, H, W] image, got {list(pixels.shape)}")
    _, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def _sample_grid(src: int, dst: int):
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def preprocess(img: FloatTensor, target) -> FloatTensor:
    """Bilinear resize of a [C, H, W] image with corner-aligned sampling.

    A one-pixel target axis samples the source centre. Same-size input is
    returned unchanged.
    """
    target = Shape(target)
    if tuple(img.shape) == tuple(target):
        return img
    c, h, w = img.shape
    if target[0] != c:
        raise FormatError(f"image has {c} channels, model expects {target[0]}")
    y0, y1, wy = _sample_grid(h, target[1])
    x0, x1, wx = _sample_grid(w, target[2])
    d = img.data.astype(np.float64)
    top = d[:, y0][:, :, x0] * (1 - wx) + d[:, y0][:, :, x1] * wx
    bot = d[:, y1][:, :, x0] * (1 - wx) + d[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[:, None] + bot * wy[:, None]
    return FloatTensor(out.astype(np.float32))
