"""Benchmark harness: size, accuracy and latency of float vs quantized models."""

from __future__ import annotations

import csv
import hashlib
import os
import platform
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..nnf import ModelGraph, forward_f
from ..ptq import QuantModel
from ..runtime import measure_latency, parallel_forward, time_pair
from .formats import load_model, same_architecture, serialized_size
from .image import load_ppm, preprocess

LATENCY_FIELDS = ("float_latency", "quant_latency", "speedup_ratio", "latency_ratio")
BENCH_BUDGETS = (1, 4)

SIZE_NOTE = (
    "float32 -> int8 storage bounds the size ratio near 4x: weights shrink 4x, "
    "int32 biases do not shrink, and headers plus quantization parameters add a "
    "fixed cost. A much larger headline reduction needs a different baseline "
    "(for example an unoptimised exported model with training state), which is "
    "not reproduced here."
)


@dataclass
class BenchReport:
    float_model_bytes: int
    quant_model_bytes: int
    size_ratio: float
    n_samples: int
    float_accuracy: float
    quant_accuracy: float
    argmax_agreement: float
    max_abs_prob_diff: float
    float_latency: dict
    quant_latency: dict  # core budget -> latency stats
    speedup_ratio: float  # float median / quant median at budget 1
    latency_ratio: float  # quant median at budget 1 / float median; the non-regression figure
    environment: dict
    notes: str = SIZE_NOTE

    def to_json(self) -> dict:
        return asdict(self)


def read_labels(path, class_labels) -> list[tuple[str, int]]:
    """Rows of ``filename,label``; a header row and label names are both accepted."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["filename", "label"]:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'filename,label', got {row}")
            name, label = row[0].strip(), row[1].strip()
            if label in class_labels:
                idx = list(class_labels).index(label)
            else:
                try:
                    idx = int(label)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: unknown label {label!r}") from None
                if not 0 <= idx < len(class_labels):
                    raise FormatError(f"{path}:{lineno}: label index {idx} out of range")
            rows.append((name, idx))
    if not rows:
        raise FormatError(f"{path}: no labelled rows")
    return rows


def _file_digest(h, path):
    h.update(Path(path).name.encode())
    h.update(Path(path).read_bytes())


def bench(float_path, quant_path, dataset_dir, labels_path, reps: int = 20) -> BenchReport:
    g = load_model(float_path)
    m = load_model(quant_path)
    if not isinstance(g, ModelGraph):
        raise FormatError(f"{float_path}: expected a float model")
    if not isinstance(m, QuantModel):
        raise FormatError(f"{quant_path}: expected a quantized model")
    if not same_architecture(g, m):
        raise FormatError(f"{float_path} and {quant_path} have different architectures")
    if tuple(g.class_labels) != tuple(m.class_labels):
        raise FormatError(f"{float_path} and {quant_path} disagree on class labels")
    rows = read_labels(labels_path, g.class_labels)

    h = hashlib.sha256()
    for p in (float_path, quant_path, labels_path):
        _file_digest(h, p)
    images, labels = [], []
    for name, label in rows:
        path = Path(dataset_dir) / name
        if not path.is_file():
            raise FileNotFoundError(2, "labelled image not found", str(path))
        _file_digest(h, path)
        images.append(preprocess(load_ppm(path), g.input_shape))
        labels.append(label)
    h.update(f"reps={reps}".encode())

    labels = np.array(labels)
    pf = np.stack([forward_f(g, x).data for x in images])
    pq = np.stack([parallel_forward(m, x, 1).data for x in images])
    af, aq = pf.argmax(axis=1), pq.argmax(axis=1)

    probe = images[0]
    # float and budget-1 quant are interleaved so their ratio is not skewed by drift
    float_lat, q1 = time_pair(lambda: forward_f(g, probe), lambda: parallel_forward(m, probe, 1), reps)
    quant_lat = {"1": q1.to_json()}
    quant_lat.update({str(b): measure_latency(m, probe, b, reps).to_json() for b in BENCH_BUDGETS if b != 1})

    return BenchReport(
        float_model_bytes=serialized_size(g),
        quant_model_bytes=serialized_size(m),
        size_ratio=serialized_size(g) / serialized_size(m),
        n_samples=len(images),
        float_accuracy=float(np.mean(af == labels)),
        quant_accuracy=float(np.mean(aq == labels)),
        argmax_agreement=float(np.mean(af == aq)),
        max_abs_prob_diff=float(np.abs(pf.astype(np.float64) - pq).max()),
        float_latency=float_lat.to_json(),
        quant_latency=quant_lat,
        speedup_ratio=float_lat.median / quant_lat["1"]["median"],
        latency_ratio=quant_lat["1"]["median"] / float_lat.median,
        environment={
            "core_count": os.cpu_count(),
            "config_hash": h.hexdigest(),
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    )


def masked(report: dict) -> dict:
    """Copy of a report dict with wall-clock fields removed."""
    return {k: v for k, v in report.items() if k not in LATENCY_FIELDS}
