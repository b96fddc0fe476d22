"""Application layer: file formats, image ingestion, screening, benchmarking, CLI."""

from .bench import BenchReport, bench
from .formats import (
    load_model,
    load_tensor,
    save_model,
    save_tensor,
    serialized_size,
    size_ratio,
)
from .image import load_ppm, preprocess, save_ppm
from .screening import ScreeningResult, Thresholds, Verdict, screen

__all__ = [
    "BenchReport", "bench",
    "load_model", "load_tensor", "save_model", "save_tensor", "serialized_size", "size_ratio",
    "load_ppm", "preprocess", "save_ppm",
    "ScreeningResult", "Thresholds", "Verdict", "screen",
]
