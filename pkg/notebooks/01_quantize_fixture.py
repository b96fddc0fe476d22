# # Quantizing the fixture classifier
#
# Build the small three-class CNN, calibrate it on a few images, convert it
# to int8 and compare it with the float model.

import numpy as np

from tinyq import nnf, ptq, runtime
from tinyq.shell import formats

# ## The float model

graph = nnf.fixture_model()
for layer in graph.layers:
    weights = getattr(layer, "weights", None)
    print(type(layer).__name__, "" if weights is None else weights.data.shape)

print("activation shapes:", [list(s) for s in nnf.validate(graph)])

# ## Calibration
#
# Each activation site gets a min/max range from 32 images.

calib = [x for x, _ in nnf.fixture_dataset(32, 1)]
stats = ptq.calibrate(graph, calib)
qmodel = ptq.quantize_model(graph, stats)
for i, qp in enumerate(qmodel.site_params):
    print(f"site {i}: scale={qp.scale:.6f} zero_point={qp.zero_point}")

# The first conv layer's real multiplier, and its fixed-point form
conv = qmodel.layers[0]
real = conv.in_qparams.scale * conv.w_qparams.scale / conv.out_qparams.scale
print("multiplier", real, "->", conv.multiplier.m0, "* 2 **", -conv.multiplier.shift)

# ## Float vs int8 on a held-out set

data = nnf.fixture_dataset(200, 42)
pf = np.stack([nnf.forward_f(graph, x).data for x, _ in data])
pq = np.stack([runtime.parallel_forward(qmodel, x, 1).data for x, _ in data])
labels = np.array([y for _, y in data])
print("float accuracy", np.mean(pf.argmax(1) == labels))
print("int8 accuracy ", np.mean(pq.argmax(1) == labels))
print("largest probability gap", np.abs(pf.astype(np.float64) - pq).max())

# ## Size on disk

print("float bytes", formats.serialized_size(graph))
print("int8 bytes ", formats.serialized_size(qmodel))
print("ratio", round(formats.size_ratio(graph, qmodel), 4))
