"""Float model graph: layer types, shape validation, reference kernels.

This is the pre-quantization path. Kernels accumulate in float64 and store
float32, so they are accurate to float32 rounding of the exact result.

Also hosts the fixture classifier and its synthetic dataset: a small
handcrafted CNN that scores each image by the mean energy of its colour
channels, and images whose labelled channel dominates. Float accuracy on
the fixture set is 100% by construction, which makes accuracy preservation
under quantization checkable without a training loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import FloatTensor, Shape

# --------------------------------------------------------------------------
# layers


def _as_tensor(x) -> FloatTensor:
    return x if isinstance(x, FloatTensor) else FloatTensor(np.asarray(x, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class Conv2D:
    """2-D convolution, weights laid out [out_ch, in_ch, kh, kw]."""

    weights: FloatTensor
    bias: FloatTensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w, b = _as_tensor(self.weights), _as_tensor(self.bias)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.shape.rank != 4:
            raise ShapeError(f"conv weights must be rank 4, got {list(w.shape)}")
        if tuple(b.shape) != (w.shape[0],):
            raise ShapeError(f"conv bias must be [{w.shape[0]}], got {list(b.shape)}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid stride {self.stride} / padding {self.padding}")
        object.__setattr__(self, "_w64", w.data.astype(np.float64))

    out_ch = property(lambda self: self.weights.shape[0])
    in_ch = property(lambda self: self.weights.shape[1])
    kh = property(lambda self: self.weights.shape[2])
    kw = property(lambda self: self.weights.shape[3])


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully connected layer, weights laid out [out_features, in_features]."""

    weights: FloatTensor
    bias: FloatTensor

    def __post_init__(self):
        w, b = _as_tensor(self.weights), _as_tensor(self.bias)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.shape.rank != 2:
            raise ShapeError(f"dense weights must be rank 2, got {list(w.shape)}")
        if tuple(b.shape) != (w.shape[0],):
            raise ShapeError(f"dense bias must be [{w.shape[0]}], got {list(b.shape)}")
        object.__setattr__(self, "_w64", w.data.astype(np.float64))

    out_features = property(lambda self: self.weights.shape[0])
    in_features = property(lambda self: self.weights.shape[1])


@dataclass(frozen=True)
class MaxPool2D:
    kh: int
    kw: int
    stride: int

    def __post_init__(self):
        if min(self.kh, self.kw, self.stride) < 1:
            raise ShapeError(f"invalid pool window {self.kh}x{self.kw} stride {self.stride}")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Conv2D, ReLU, MaxPool2D, Flatten, Dense, Softmax]


@dataclass(frozen=True, eq=False)
class ModelGraph:
    input_shape: Shape
    layers: tuple = ()
    class_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", Shape(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_labels", tuple(self.class_labels))


# --------------------------------------------------------------------------
# shape arithmetic


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def layer_output_shape(layer, shape: Shape, index=None) -> Shape:
    """Shape produced by ``layer`` on an input of ``shape``."""
    if isinstance(layer, Conv2D):
        if shape.rank != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"Conv2D expects [{layer.in_ch}, H, W], got {list(shape)}", index)
        h = _conv_out(shape[1], layer.kh, layer.stride, layer.padding)
        w = _conv_out(shape[2], layer.kw, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"Conv2D kernel larger than padded input {list(shape)}", index)
        return Shape((layer.out_ch, h, w))
    if isinstance(layer, MaxPool2D):
        if shape.rank != 3:
            raise ShapeError(f"MaxPool2D expects [C, H, W], got {list(shape)}", index)
        if shape[1] < layer.kh or shape[2] < layer.kw:
            raise ShapeError(f"pool window larger than input {list(shape)}", index)
        return Shape((shape[0], _conv_out(shape[1], layer.kh, layer.stride, 0),
                      _conv_out(shape[2], layer.kw, layer.stride, 0)))
    if isinstance(layer, Dense):
        if shape.rank != 1 or shape[0] != layer.in_features:
            raise ShapeError(f"Dense expects [{layer.in_features}], got {list(shape)}", index)
        return Shape((layer.out_features,))
    if isinstance(layer, Flatten):
        return Shape((shape.element_count,))
    if isinstance(layer, Softmax):
        if shape.rank != 1:
            raise ShapeError(f"Softmax expects a vector, got {list(shape)}", index)
        return shape
    if isinstance(layer, ReLU):
        return shape
    raise ShapeError(f"unknown layer type {type(layer).__name__}", index)


def validate(g: ModelGraph) -> list[Shape]:
    """Return the activation shape after each layer.

    Raises:
        ShapeError: a layer cannot consume its input, Softmax is not the last
            layer, or the label count disagrees with the output width.
    """
    trace = []
    shape = g.input_shape
    last = len(g.layers) - 1
    for i, layer in enumerate(g.layers):
        if isinstance(layer, Softmax) and i != last:
            raise ShapeError("Softmax must be the last layer", i)
        shape = layer_output_shape(layer, shape, i)
        trace.append(shape)
    if g.class_labels and g.layers and len(g.class_labels) != shape.element_count:
        raise ShapeError(
            f"{len(g.class_labels)} class labels for an output of width {shape.element_count}"
        )
    return trace


def checked_trace(g: ModelGraph) -> list[Shape]:
    """:func:`validate`, computed once per graph."""
    trace = g.__dict__.get("_trace")
    if trace is None:
        trace = validate(g)
        object.__setattr__(g, "_trace", trace)
    return trace


# --------------------------------------------------------------------------
# kernels


def windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, pad_value=0):
    """View of all receptive fields of a [C, H, W] array as [C, Ho, Wo, kh, kw]."""
    if padding:
        c, h, w = x.shape
        padded = np.full((c, h + 2 * padding, w + 2 * padding), pad_value, dtype=x.dtype)
        padded[:, padding:padding + h, padding:padding + w] = x
        x = padded
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def pool_max(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Window maxima of a [C, H, W] array, as the max over kh*kw strided slices."""
    ho = (x.shape[1] - kh) // stride + 1
    wo = (x.shape[2] - kw) // stride + 1
    out = None
    for u in range(kh):
        for v in range(kw):
            part = x[:, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride]
            out = part.copy() if out is None else np.maximum(out, part, out=out)
    return out


def conv2d_f(x: FloatTensor, layer: Conv2D) -> FloatTensor:
    if x.shape.rank != 3 or x.shape[0] != layer.in_ch:
        raise ShapeError(f"Conv2D expects [{layer.in_ch}, H, W], got {list(x.shape)}")
    win = windows(x.data.astype(np.float64), layer.kh, layer.kw, layer.stride, layer.padding)
    out = np.tensordot(layer._w64, win, axes=([1, 2, 3], [0, 3, 4]))
    out += layer.bias.data.astype(np.float64)[:, None, None]
    return FloatTensor(out.astype(np.float32))


def dense_f(x: FloatTensor, layer: Dense) -> FloatTensor:
    if x.shape.rank != 1 or x.shape[0] != layer.in_features:
        raise ShapeError(f"Dense expects [{layer.in_features}], got {list(x.shape)}")
    out = layer._w64 @ x.data.astype(np.float64)
    out += layer.bias.data
    return FloatTensor(out.astype(np.float32))


def relu_f(x: FloatTensor) -> FloatTensor:
    return FloatTensor(np.maximum(x.data, np.float32(0)))


def maxpool_f(x: FloatTensor, layer: MaxPool2D) -> FloatTensor:
    layer_output_shape(layer, x.shape)
    return FloatTensor(pool_max(x.data, layer.kh, layer.kw, layer.stride))


def softmax_f(x: FloatTensor) -> FloatTensor:
    """Softmax of a logit vector, max-subtracted for stability."""
    if x.shape.rank != 1:
        raise ShapeError(f"Softmax expects a vector, got {list(x.shape)}")
    z = x.data.astype(np.float64)
    e = np.exp(z - z.max())
    return FloatTensor((e / e.sum()).astype(np.float32))


def flatten_f(x: FloatTensor) -> FloatTensor:
    return FloatTensor(x.data.reshape(-1))


def apply_layer_f(layer, x: FloatTensor) -> FloatTensor:
    if isinstance(layer, Conv2D):
        return conv2d_f(x, layer)
    if isinstance(layer, Dense):
        return dense_f(x, layer)
    if isinstance(layer, ReLU):
        return relu_f(x)
    if isinstance(layer, MaxPool2D):
        return maxpool_f(x, layer)
    if isinstance(layer, Flatten):
        return flatten_f(x)
    if isinstance(layer, Softmax):
        return softmax_f(x)
    raise ShapeError(f"unknown layer type {type(layer).__name__}")


def forward_sites(g: ModelGraph, x: FloatTensor) -> list[FloatTensor]:
    """Activations at every graph edge: index 0 is the input, i+1 is layer i's output."""
    checked_trace(g)
    if tuple(x.shape) != tuple(g.input_shape):
        raise ShapeError(f"input shape {list(x.shape)} != model input {list(g.input_shape)}")
    acts = [x]
    for i, layer in enumerate(g.layers):
        try:
            acts.append(apply_layer_f(layer, acts[-1]))
        except ShapeError as exc:
            raise ShapeError(str(exc), i) from exc
    return acts


def forward_f(g: ModelGraph, x: FloatTensor) -> FloatTensor:
    return forward_sites(g, x)[-1]


# --------------------------------------------------------------------------
# fixture classifier + dataset

FIXTURE_SIZE = 16
FIXTURE_CHANNELS = 32
FIXTURE_GAIN = 8.0
FIXTURE_LABELS = ("mpox", "other", "normal")


def fixture_model(channels: int = FIXTURE_CHANNELS) -> ModelGraph:
    """Handcrafted 3-class CNN over [3, 16, 16] images.

    Conv 3->C (3x3 box filter of input channel ``o % 3``), ReLU, 2x2 pool,
    Conv C->C (per-channel identity), ReLU, 2x2 pool, Flatten, Dense
    (C*16)->3 averaging the channels tied to each class, Softmax.
    """
    c = channels
    w1 = np.zeros((c, 3, 3, 3), np.float32)
    for o in range(c):
        w1[o, o % 3] = 1.0 / 9.0
    w2 = np.zeros((c, c, 3, 3), np.float32)
    for o in range(c):
        w2[o, o, 1, 1] = 1.0
    pooled = (FIXTURE_SIZE // 4) ** 2
    w3 = np.zeros((3, c, pooled), np.float32)
    for k in range(3):
        members = [o for o in range(c) if o % 3 == k]
        w3[k, members, :] = FIXTURE_GAIN / (len(members) * pooled)
    layers = (
        Conv2D(w1, np.zeros(c, np.float32), stride=1, padding=1),
        ReLU(),
        MaxPool2D(2, 2, 2),
        Conv2D(w2, np.zeros(c, np.float32), stride=1, padding=1),
        ReLU(),
        MaxPool2D(2, 2, 2),
        Flatten(),
        Dense(w3.reshape(3, c * pooled), np.zeros(3, np.float32)),
        Softmax(),
    )
    return ModelGraph(Shape((3, FIXTURE_SIZE, FIXTURE_SIZE)), layers, FIXTURE_LABELS)


def pixels_to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixel bytes to float32 intensities in [0, 1]."""
    return pixels.astype(np.float32) / np.float32(255.0)


def fixture_pixels(n: int, seed: int) -> list[tuple[np.ndarray, int]]:
    """Synthetic images as uint8 [3, 16, 16] arrays with labels in {0, 1, 2}."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out = []
    shape = (3, FIXTURE_SIZE, FIXTURE_SIZE)
    for _ in range(n):
        label = int(rng.integers(0, 3))
        # level bands sit inside [0.8, 1.0] / [0, 0.2] with noise margin
        level = rng.uniform(0.05, 0.15, size=3)
        level[label] = rng.uniform(0.85, 0.95)
        img = level[:, None, None] + rng.uniform(-0.05, 0.05, size=shape)
        pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        out.append((pixels, label))
    return out


def fixture_dataset(n: int, seed: int) -> list[tuple[FloatTensor, int]]:
    """Deterministic labelled images; values lie on the 1/255 grid so PPM export is lossless."""
    return [(FloatTensor(pixels_to_unit(p)), label) for p, label in fixture_pixels(n, seed)]
