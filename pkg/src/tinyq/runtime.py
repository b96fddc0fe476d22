"""Core-budgeted inference, energy/latency model and battery simulator.

``parallel_forward`` splits the output channels (conv) or output features
(dense) of every weighted layer into contiguous blocks, one per worker. Each
output element is produced by exactly one worker with the same kernel the
serial path uses, so results are bit-identical for every core budget.

The energy model is deliberately small:

    latency(c) = t1 * ((1 - f) + f / c)          (Amdahl)
    energy(c)  = (p_base + c * p_core) * latency(c)

``simulate`` drains a battery scan by scan under three strategies (always
performance, always saving, governed) and reports how many scans each gets.
"""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ptq
from .eqo import DeviceState, GovernorPolicy, Mode, decide, policy_from_json
from .errors import PolicyError, ShapeError
from .nnf import MaxPool2D, ReLU
from .ptq import QConv2D, QDense, QuantModel
from .tensor import QMIN, FloatTensor, QuantTensor

# --------------------------------------------------------------------------
# parallel inference


def partition(units: int, budget: int) -> list[tuple[int, int]]:
    """Contiguous ``[lo, hi)`` blocks over ``units``; the last block takes the remainder."""
    if budget < 1:
        raise PolicyError(f"core budget must be >= 1, got {budget}")
    workers = min(budget, units)
    if workers <= 1:
        return [(0, units)]
    size = units // workers
    bounds = [(i * size, (i + 1) * size) for i in range(workers - 1)]
    bounds.append(((workers - 1) * size, units))
    return bounds


def _run_blocks(pool, units, budget, block_fn):
    blocks = partition(units, budget)
    if pool is None or len(blocks) == 1:
        parts = [block_fn(lo, hi) for lo, hi in blocks]
    else:
        parts = list(pool.map(lambda b: block_fn(*b), blocks))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class _Step:
    """One weighted layer plus the ReLU/MaxPool layers fused into its requantization."""

    layer: object
    pools: tuple
    floor: int
    first: int  # index of ``layer`` in the model
    last: int  # index of the last layer covered


def _plan(m: QuantModel) -> list:
    """Fused execution plan, built once per model.

    ReLU and MaxPool commute with the monotone requantization step, so when
    they follow a weighted layer they run on its accumulators instead: pooling
    first shrinks the requantization work and ReLU becomes the lower clamp bound.
    """
    plan = m.__dict__.get("_plan")
    if plan is not None:
        return plan
    ptq.checked_trace(m)
    body = m.layers[:-1] if m.ends_in_softmax else m.layers
    plan, i = [], 0
    while i < len(body):
        layer = body[i]
        if not isinstance(layer, (QConv2D, QDense)):
            plan.append(layer)
            i += 1
            continue
        pools, floor, j = [], QMIN, i + 1
        while j < len(body) and isinstance(body[j], (ReLU, MaxPool2D)):
            if isinstance(body[j], MaxPool2D):
                if isinstance(layer, QDense):
                    break
                pools.append(body[j])
            else:
                floor = layer.out_qparams.zero_point
            j += 1
        plan.append(_Step(layer, tuple(pools), floor, i, j - 1))
        i = j
    object.__setattr__(m, "_plan", plan)
    return plan


def _forward_layers(m: QuantModel, qx: QuantTensor, budget: int, pool) -> QuantTensor:
    for step in _plan(m):
        if not isinstance(step, _Step):
            qx = ptq.apply_layer_q(step, qx)
            continue
        layer = step.layer
        try:
            if isinstance(layer, QConv2D):
                win = ptq.conv_windows(qx, layer)
                out = _run_blocks(pool, layer.out_ch, budget,
                                  lambda lo, hi: ptq.conv_block(win, layer, lo, hi, step.pools, step.floor))
            else:
                xs = ptq.dense_input(qx, layer)
                out = _run_blocks(pool, layer.out_features, budget,
                                  lambda lo, hi: ptq.dense_block(xs, layer, lo, hi, step.floor))
        except ShapeError as exc:
            raise ShapeError(str(exc), step.first) from exc
        qx = QuantTensor(out, layer.out_qparams)
    return qx


def parallel_forward(m: QuantModel, x: FloatTensor, core_budget: int) -> FloatTensor:
    """Quantized inference on at most ``core_budget`` concurrent workers."""
    if core_budget < 1:
        raise PolicyError(f"core budget must be >= 1, got {core_budget}")
    if tuple(x.shape) != tuple(m.input_shape):
        raise ShapeError(f"input shape {list(x.shape)} != model input {list(m.input_shape)}")
    qx = ptq.quantize_tensor(x, m.site_params[0])
    if core_budget == 1:
        return ptq.finish(m, _forward_layers(m, qx, 1, None))
    with ThreadPoolExecutor(max_workers=core_budget, thread_name_prefix="tinyq") as pool:
        return ptq.finish(m, _forward_layers(m, qx, core_budget, pool))


# --------------------------------------------------------------------------
# latency measurement


@dataclass(frozen=True)
class LatencyStats:
    min: float
    median: float
    mean: float
    reps: int

    def to_json(self) -> dict:
        return asdict(self)


def time_call(fn: Callable[[], object], reps: int) -> LatencyStats:
    """Wall-clock ``fn`` ``reps`` times after one untimed warm-up call."""
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return LatencyStats(min(samples), statistics.median(samples), statistics.fmean(samples), reps)


def time_pair(fn_a: Callable[[], object], fn_b: Callable[[], object], reps: int) -> tuple[LatencyStats, LatencyStats]:
    """Time two calls alternately so both see the same machine conditions."""
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    fn_a()
    fn_b()
    samples = ([], [])
    for _ in range(reps):
        for fn, out in ((fn_a, samples[0]), (fn_b, samples[1])):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    return tuple(LatencyStats(min(s), statistics.median(s), statistics.fmean(s), reps) for s in samples)


def measure_latency(m: QuantModel, x: FloatTensor, core_budget: int, reps: int = 20) -> LatencyStats:
    return time_call(lambda: parallel_forward(m, x, core_budget), reps)


# --------------------------------------------------------------------------
# energy model


@dataclass(frozen=True)
class EnergyModel:
    """Affine power, Amdahl latency.

    Attributes:
        p_base: Package power while a scan runs, watts.
        p_core: Extra power per active core, watts.
        parallel_fraction: Share of a scan that scales with cores.
        t1: Single-core latency of one scan, seconds.
    """

    p_base: float = 0.5
    p_core: float = 0.8
    parallel_fraction: float = 0.7
    t1: float = 0.8

    def __post_init__(self):
        if min(self.p_base, self.p_core) < 0:
            raise PolicyError("power terms must be non-negative")
        if not 0 <= self.parallel_fraction <= 1:
            raise PolicyError(f"parallel_fraction must lie in [0, 1], got {self.parallel_fraction}")
        if not self.t1 > 0:
            raise PolicyError(f"t1 must be positive, got {self.t1}")


def latency_model(em: EnergyModel, cores: int) -> float:
    if cores < 1:
        raise PolicyError(f"cores must be >= 1, got {cores}")
    f = em.parallel_fraction
    return em.t1 * ((1 - f) + f / cores)


def energy_per_scan(em: EnergyModel, cores: int) -> float:
    return (em.p_base + cores * em.p_core) * latency_model(em, cores)


# --------------------------------------------------------------------------
# battery simulation

STRATEGIES = ("performance", "saving", "eqo")


@dataclass(frozen=True)
class Battery:
    capacity_joules: float
    level_joules: Optional[float] = None  # defaults to full

    def __post_init__(self):
        if not math.isfinite(self.capacity_joules) or self.capacity_joules < 0:
            raise PolicyError(f"capacity_joules must be >= 0, got {self.capacity_joules}")
        if self.level_joules is None:
            object.__setattr__(self, "level_joules", float(self.capacity_joules))
        if not 0 <= self.level_joules <= self.capacity_joules:
            raise PolicyError(f"level_joules must lie in [0, {self.capacity_joules}], got {self.level_joules}")


@dataclass(frozen=True)
class DeviceProfile:
    """The static part of a device snapshot; battery is filled in per scan."""

    available_memory_bytes: int = 4 << 30
    total_cores: int = 8


@dataclass(frozen=True)
class SimConfig:
    battery: Battery = field(default_factory=lambda: Battery(30000.0))
    energy_model: EnergyModel = field(default_factory=EnergyModel)
    policy: GovernorPolicy = field(default_factory=GovernorPolicy)
    device: DeviceProfile = field(default_factory=DeviceProfile)
    working_set_bytes: int = 2 << 20

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        sections = {
            "battery": Battery,
            "energy_model": EnergyModel,
            "policy": None,
            "device": DeviceProfile,
        }
        unknown = set(d) - set(sections) - {"working_set_bytes"}
        if unknown:
            raise PolicyError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        try:
            for key, typ in sections.items():
                if key in d:
                    kwargs[key] = policy_from_json(d[key]) if key == "policy" else typ(**d[key])
        except TypeError as exc:
            raise PolicyError(f"bad config section: {exc}") from exc
        if "working_set_bytes" in d:
            kwargs["working_set_bytes"] = int(d["working_set_bytes"])
        return cls(**kwargs)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceEntry:
    battery_pct: float
    mode: str
    core_budget: int
    energy_joules: float


@dataclass
class SimReport:
    scans: dict  # strategy -> completed scans
    scans_by_mode: dict  # governed run only
    additional_scans: int
    extension_ratio: float
    energy_per_scan: dict  # core budget -> joules
    trace: list  # governed run, one TraceEntry per scan
    stop: dict  # strategy -> {"used_joules", "next_scan_joules"}

    def to_json(self) -> dict:
        out = asdict(self)
        out["energy_per_scan"] = {str(k): v for k, v in self.energy_per_scan.items()}
        return out


def _drain(cfg: SimConfig, strategy: str, energy_of: Callable[[int], float]):
    """Run one strategy to exhaustion; returns (trace, used joules, next scan energy)."""
    level0 = cfg.battery.level_joules
    cap = cfg.battery.capacity_joules
    cores = cfg.device.total_cores
    fixed = {
        "performance": (Mode.PERFORMANCE, min(cfg.policy.perf_core_cap, cores)),
        "saving": (Mode.ENERGY_SAVING, min(cfg.policy.saving_core_cap, cores)),
    }
    trace = []
    used = 0.0
    while True:
        pct = 100.0 * (level0 - used) / cap if cap > 0 else 0.0
        pct = min(max(pct, 0.0), 100.0)
        if strategy == "eqo":
            state = DeviceState(pct, False, cfg.device.available_memory_bytes, cores)
            d = decide(cfg.policy, state, cfg.working_set_bytes)
            mode, budget = d.mode, d.core_budget
        else:
            mode, budget = fixed[strategy]
        e = energy_of(budget)
        if used + e > level0:
            return trace, used, e
        used += e
        trace.append(TraceEntry(pct, mode.value, budget, e))


def simulate(cfg: SimConfig) -> SimReport:
    """Count scans per battery charge under each strategy."""
    em = cfg.energy_model
    budgets = sorted({
        min(cfg.policy.perf_core_cap, cfg.device.total_cores),
        min(cfg.policy.saving_core_cap, cfg.device.total_cores),
    })
    table = {c: energy_per_scan(em, c) for c in budgets}
    if min(table.values()) <= 0:
        raise PolicyError("per-scan energy must be positive to simulate a drain")
    scans, stop, traces = {}, {}, {}
    for strategy in STRATEGIES:
        trace, used, nxt = _drain(cfg, strategy, table.__getitem__)
        scans[strategy] = len(trace)
        stop[strategy] = {"used_joules": used, "next_scan_joules": nxt}
        traces[strategy] = trace
    by_mode = {m.value: 0 for m in Mode}
    for entry in traces["eqo"]:
        by_mode[entry.mode] += 1
    extra = scans["eqo"] - scans["performance"]
    ratio = extra / scans["performance"] if scans["performance"] else 0.0
    return SimReport(scans, by_mode, extra, ratio, table, traces["eqo"], stop)
