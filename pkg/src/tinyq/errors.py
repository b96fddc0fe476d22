"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`TinyQError`,
so callers (and the CLI) can separate bad input data from programming errors.
"""


class TinyQError(Exception):
    """Base class for all package errors."""


class TensorError(TinyQError, ValueError):
    """Invalid tensor construction or indexing."""


class ShapeError(TinyQError, ValueError):
    """Shape-incompatible layer, graph or kernel input."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class QuantizationError(TinyQError, ValueError):
    """Quantization parameters cannot be built, or a pipeline is mis-wired."""


class PolicyError(TinyQError, ValueError):
    """Invalid governor policy, device state or simulation config."""


class InsufficientMemoryError(TinyQError):
    """The device cannot hold the model's working set."""


class FormatError(TinyQError):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ScreeningError(TinyQError, ValueError):
    """The model or label set cannot produce a screening verdict."""
