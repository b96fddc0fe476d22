"""Dense row-major tensors for float32 and int8 data.

Tensors are thin, immutable wrappers around numpy arrays. The wrappers exist
to enforce the invariants every downstream kernel relies on (rank 1-4,
finite floats, int8 range, positive scale) at one boundary instead of in
every kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import TensorError

MAX_RANK = 4
MAX_ELEMENTS = 2**31 - 1
QMIN, QMAX = -128, 127


class Shape(tuple):
    """Tensor dimensions: 1 to 4 positive integers.

    Subclasses ``tuple`` so it can be handed straight to numpy.
    """

    def __new__(cls, dims: Iterable[int]):
        dims = tuple(dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise TensorError(f"rank must be in [1, {MAX_RANK}], got {len(dims)}")
        out = []
        for i, d in enumerate(dims):
            if isinstance(d, (bool, np.bool_)) or int(d) != d:
                raise TensorError(f"dim {i} is not an integer: {d!r}")
            if d < 1:
                raise TensorError(f"dim {i} must be >= 1, got {d}")
            out.append(int(d))
        self = super().__new__(cls, out)
        if self.element_count > MAX_ELEMENTS:
            raise TensorError(f"element count {self.element_count} exceeds 2^31 - 1")
        return self

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self)

    @property
    def rank(self) -> int:
        return len(self)

    @property
    def element_count(self) -> int:
        return math.prod(self)

    def __repr__(self):
        return f"Shape({list(self)})"


def _readonly(arr: np.ndarray) -> np.ndarray:
    # copy anything the caller could still mutate
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FloatTensor:
    """Immutable float32 tensor. Rejects NaN and infinities."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        object.__setattr__(self, "_shape", Shape(arr.shape))
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.flatnonzero(bad.ravel())[0])
            raise TensorError(f"non-finite value {arr.ravel()[idx]} at index {idx}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def shape(self) -> Shape:
        return self._shape

    def tolist(self):
        return self.data.ravel().tolist()


@dataclass(frozen=True)
class QuantParams:
    """Affine map ``real = (q - zero_point) * scale``."""

    scale: float
    zero_point: int

    def __post_init__(self):
        scale = float(np.float32(self.scale))
        if not (math.isfinite(scale) and scale > 0):
            raise TensorError(f"scale must be positive and finite, got {self.scale}")
        if int(self.zero_point) != self.zero_point or not QMIN <= self.zero_point <= QMAX:
            raise TensorError(f"zero_point must be an integer in [-128, 127], got {self.zero_point}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", int(self.zero_point))


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Immutable int8 tensor with its quantization parameters."""

    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.int8:
            if not np.issubdtype(arr.dtype, np.integer):
                raise TensorError(f"quantized data must be integer, got {arr.dtype}")
            if arr.size and (arr.min() < QMIN or arr.max() > QMAX):
                raise TensorError("quantized values must lie in [-128, 127]")
            arr = arr.astype(np.int8)
        object.__setattr__(self, "_shape", Shape(arr.shape))
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def shape(self) -> Shape:
        return self._shape


def make_tensor(shape: Sequence[int], values: Sequence[float]) -> FloatTensor:
    """Build a float tensor from a flat row-major value list."""
    shape = Shape(shape)
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size != shape.element_count:
        raise TensorError(
            f"length mismatch: shape {list(shape)} needs {shape.element_count} values, got {flat.size}"
        )
    return FloatTensor(flat.astype(np.float32).reshape(shape))


def offset(shape: Sequence[int], coords: Sequence[int]) -> int:
    """Row-major linear index of ``coords``; last coordinate varies fastest."""
    shape = Shape(shape)
    if len(coords) != shape.rank:
        raise TensorError(f"expected {shape.rank} coordinates, got {len(coords)}")
    idx = 0
    for axis, (c, d) in enumerate(zip(coords, shape)):
        if not 0 <= c < d:
            raise TensorError(f"coordinate {c} out of bounds for axis {axis} of size {d}")
        idx = idx * d + int(c)
    return idx


def minmax(t: FloatTensor) -> tuple[float, float]:
    return float(t.data.min()), float(t.data.max())
