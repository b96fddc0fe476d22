"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

from ..eqo import DeviceState, GovernorPolicy, decide, working_set_estimate
from ..errors import TinyQError
from ..nnf import ModelGraph, fixture_model, fixture_pixels
from ..ptq import QuantModel, calibrate, quantize_model
from ..runtime import SimConfig, simulate
from .bench import bench
from .formats import load_model, save_model
from .image import load_ppm, preprocess, save_ppm
from .screening import Thresholds, screen

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DEFAULT_MEMORY = 4 << 30


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _device_args(p, required: bool):
    p.add_argument("--battery", type=float, required=required, default=None if required else 100.0,
                   help="battery level in percent")
    p.add_argument("--charging", type=_bool, required=required, default=None if required else False)
    p.add_argument("--mem", type=int, required=required, default=None if required else DEFAULT_MEMORY,
                   help="available memory in bytes")
    p.add_argument("--cores", type=int, required=required, default=None if required else os.cpu_count() or 1)
    p.add_argument("--threshold", type=float, default=75.0, help="battery threshold, percent")
    p.add_argument("--perf-cap", type=int, default=4)
    p.add_argument("--saving-cap", type=int, default=1)
    p.add_argument("--headroom", type=float, default=1.5, help="memory headroom factor")


def _policy(args) -> GovernorPolicy:
    return GovernorPolicy(args.threshold, args.perf_cap, args.saving_cap, args.headroom)


def _state(args) -> DeviceState:
    return DeviceState(args.battery, args.charging, args.mem, args.cores)


def _load_quant(path) -> QuantModel:
    m = load_model(path)
    if not isinstance(m, QuantModel):
        raise TinyQError(f"{path}: expected a quantized model (run calibrate+quantize first)")
    return m


def _images_in(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(2, "not a directory", str(d))
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise TinyQError(f"{d}: no .ppm images found")
    return files


# --------------------------------------------------------------------------
# subcommands


def cmd_fixture(args):
    out = Path(args.out)
    images = out / "images"
    images.mkdir(parents=True, exist_ok=True)
    g = fixture_model()
    save_model(g, out / "float.aicm")
    rows = ["filename,label"]
    for i, (pixels, label) in enumerate(fixture_pixels(args.n, args.seed)):
        name = f"img_{i:05d}.ppm"
        save_ppm(pixels, images / name)
        rows.append(f"{name},{label}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n")
    _emit({"model": str(out / "float.aicm"), "images": str(images), "labels": str(out / "labels.csv"), "n": args.n})


def cmd_quantize(args):
    g = load_model(args.model)
    if not isinstance(g, ModelGraph):
        raise TinyQError(f"{args.model}: expected a float model")
    files = _images_in(args.calib)[: args.limit]
    samples = [preprocess(load_ppm(f), g.input_shape) for f in files]
    m = quantize_model(g, calibrate(g, samples, args.percentile))
    size = save_model(m, args.out)
    _emit({"model": str(args.out), "bytes": size, "calibration_samples": len(samples)})


def cmd_infer(args):
    m = _load_quant(args.model)
    img = load_ppm(args.image)
    result = screen(m, img, _state(args), _policy(args),
                    Thresholds(args.tau_pos, args.tau_margin), args.positive_label)
    _emit(result.to_json())


def cmd_bench(args):
    report = bench(args.float, args.quant, args.data, args.labels, reps=args.reps)
    _emit(report.to_json(), args.report)


def cmd_govern(args):
    m = _load_quant(args.model)
    _emit(decide(_policy(args), _state(args), working_set_estimate(m)).to_json())


def _read_config(source: str) -> dict:
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        res = resources.files("tinyq").joinpath("data", f"{name}.json")
        if not res.is_file():
            raise TinyQError(f"--config: no builtin config named {name!r}")
        return json.loads(res.read_text())
    with open(source) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise TinyQError(f"{source}: invalid JSON: {exc}") from exc


def cmd_simulate(args):
    cfg = SimConfig.from_json(_read_config(args.config))
    report = simulate(cfg)
    _emit(report.to_json(), args.report)
    if args.report:
        summary = {k: v for k, v in report.to_json().items() if k not in ("trace", "stop")}
        print(json.dumps(summary, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tinyq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fixture", help="write the fixture float model, images and labels")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("calibrate+quantize", aliases=["quantize"], help="calibrate and quantize a float model")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True, help="directory of .ppm calibration images")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None, help="use at most this many images")
    s.add_argument("--percentile", type=float, default=None, help="clip ranges to this percentile")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("infer", help="screen one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    _device_args(s, required=False)
    s.add_argument("--tau-pos", type=float, default=0.5)
    s.add_argument("--tau-margin", type=float, default=0.1)
    s.add_argument("--positive-label", default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="compare float and quantized models")
    s.add_argument("--float", required=True)
    s.add_argument("--quant", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--reps", type=int, default=20)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("govern", help="print the governor decision for a device state")
    _device_args(s, required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_govern)

    s = sub.add_parser("simulate", help="battery drain simulation")
    s.add_argument("--config", required=True, help="JSON config path, or builtin:<name>")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        args.func(args)
    except OSError as exc:
        name = exc.filename or ""
        print(f"error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except (TinyQError, ValueError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
