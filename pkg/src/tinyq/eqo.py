"""Context-aware core governor.

Maps a device snapshot (battery, charging, free memory, core count) to an
execution mode and a core budget:

    Performance   iff  charging  or  (battery > threshold  and  memory sufficient)
    EnergySaving  otherwise

Performance runs on ``min(perf_core_cap, total_cores)`` cores, energy saving on
``min(saving_core_cap, total_cores)``. Decisions are pure functions of one
snapshot; there is no hysteresis.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

from .errors import PolicyError

MIB = 1 << 20
FIXED_OVERHEAD_BYTES = MIB


class Mode(str, enum.Enum):
    PERFORMANCE = "Performance"
    ENERGY_SAVING = "EnergySaving"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class DeviceState:
    battery_pct: float
    charging: bool
    available_memory_bytes: int
    total_cores: int

    def __post_init__(self):
        if not (math.isfinite(self.battery_pct) and 0 <= self.battery_pct <= 100):
            raise PolicyError(f"battery_pct must lie in [0, 100], got {self.battery_pct}")
        if self.available_memory_bytes < 0:
            raise PolicyError(f"available_memory_bytes must be >= 0, got {self.available_memory_bytes}")
        if self.total_cores < 1:
            raise PolicyError(f"total_cores must be >= 1, got {self.total_cores}")


@dataclass(frozen=True)
class GovernorPolicy:
    battery_threshold_pct: float = 75.0
    perf_core_cap: int = 4
    saving_core_cap: int = 1
    memory_headroom_factor: float = 1.5

    def __post_init__(self):
        if not 0 <= self.battery_threshold_pct <= 100:
            raise PolicyError(f"battery_threshold_pct must lie in [0, 100], got {self.battery_threshold_pct}")
        if not 1 <= self.saving_core_cap <= self.perf_core_cap:
            raise PolicyError(
                f"need 1 <= saving_core_cap <= perf_core_cap, got {self.saving_core_cap} / {self.perf_core_cap}"
            )
        if not self.memory_headroom_factor >= 1:
            raise PolicyError(f"memory_headroom_factor must be >= 1, got {self.memory_headroom_factor}")


@dataclass(frozen=True)
class GovernorDecision:
    mode: Mode
    core_budget: int

    def to_json(self) -> dict:
        return {"mode": self.mode.value, "core_budget": self.core_budget}


def working_set_estimate(m) -> int:
    """Peak memory estimate in bytes for a quantized model.

    int8 weight payload + two buffers of the largest activation (int8,
    one byte per element) + 1 MiB fixed overhead.
    """
    from .ptq import QConv2D, QDense, checked_trace

    weight_bytes = sum(layer.weights.size for layer in m.layers if isinstance(layer, (QConv2D, QDense)))
    largest = max([m.input_shape.element_count] + [s.element_count for s in checked_trace(m)])
    return weight_bytes + 2 * largest + FIXED_OVERHEAD_BYTES


def memory_sufficient(s: DeviceState, working_set: int, p: GovernorPolicy) -> bool:
    return s.available_memory_bytes >= p.memory_headroom_factor * working_set


def decide(p: GovernorPolicy, s: DeviceState, working_set: int) -> GovernorDecision:
    perf = s.charging or (s.battery_pct > p.battery_threshold_pct and memory_sufficient(s, working_set, p))
    if perf:
        return GovernorDecision(Mode.PERFORMANCE, min(p.perf_core_cap, s.total_cores))
    return GovernorDecision(Mode.ENERGY_SAVING, min(p.saving_core_cap, s.total_cores))


def policy_from_json(d: dict) -> GovernorPolicy:
    known = set(asdict(GovernorPolicy()))
    unknown = set(d) - known
    if unknown:
        raise PolicyError(f"unknown policy fields: {sorted(unknown)}")
    return GovernorPolicy(**d)
