"""INT8 post-training quantization and battery-aware CPU inference for small CNNs.

Modules:

    tensor   float32 / int8 tensors and quantization parameters
    nnf      float model graph, reference kernels, fixture model and data
    ptq      calibration, quantization, integer-only kernels
    eqo      battery/memory-aware core governor
    runtime  core-budgeted inference, energy model, battery simulator
    shell    file formats, images, screening, benchmark harness, CLI
"""

from .eqo import DeviceState, GovernorDecision, GovernorPolicy, Mode, decide, working_set_estimate
from .nnf import ModelGraph, fixture_dataset, fixture_model, forward_f, validate
from .ptq import QuantModel, calibrate, forward_q, quantize_model
from .runtime import EnergyModel, SimConfig, parallel_forward, simulate
from .tensor import FloatTensor, QuantParams, QuantTensor, Shape, make_tensor

__version__ = "0.1.0"

__all__ = [
    "DeviceState", "GovernorDecision", "GovernorPolicy", "Mode", "decide", "working_set_estimate",
    "ModelGraph", "fixture_dataset", "fixture_model", "forward_f", "validate",
    "QuantModel", "calibrate", "forward_q", "quantize_model",
    "EnergyModel", "SimConfig", "parallel_forward", "simulate",
    "FloatTensor", "QuantParams", "QuantTensor", "Shape", "make_tensor",
]
