# # End-to-end screening with files on disk
#
# Write fixture images as PPM, quantize from those files, then screen one
# image under two device states.

import tempfile
from pathlib import Path

from tinyq import nnf, ptq
from tinyq.eqo import DeviceState
from tinyq.shell import formats, image
from tinyq.shell.bench import bench
from tinyq.shell.screening import screen

work = Path(tempfile.mkdtemp(prefix="tinyq-"))
(work / "images").mkdir()

# ## Files

rows = ["filename,label"]
for i, (pixels, label) in enumerate(nnf.fixture_pixels(40, 42)):
    image.save_ppm(pixels, work / "images" / f"img_{i:03d}.ppm")
    rows.append(f"img_{i:03d}.ppm,{label}")
(work / "labels.csv").write_text("\n".join(rows) + "\n")

graph = nnf.fixture_model()
formats.save_model(graph, work / "float.aicm")

calib = [image.load_ppm(p) for p in sorted((work / "images").glob("*.ppm"))[:32]]
qmodel = ptq.quantize_model(graph, ptq.calibrate(graph, calib))
formats.save_model(qmodel, work / "quant.aicm")

# ## Screening one image

img = image.load_ppm(work / "images" / "img_000.ppm")
m = formats.load_model(work / "quant.aicm")
for battery in (90, 30):
    r = screen(m, img, DeviceState(battery, False, 4 << 30, 8))
    print(battery, r.verdict.value, r.top_label, [round(p, 4) for p in r.class_probabilities],
          r.mode_used, r.core_budget_used)

# ## A larger image goes through the bilinear resize

big = image.preprocess(img, [3, 64, 64])
print(screen(m, big, DeviceState(90, False, 4 << 30, 8)).top_label)

# ## Benchmark report

report = bench(work / "float.aicm", work / "quant.aicm", work / "images", work / "labels.csv", reps=10)
for key in ("size_ratio", "float_accuracy", "quant_accuracy", "argmax_agreement", "latency_ratio"):
    print(key, getattr(report, key))
