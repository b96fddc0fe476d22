"""End-to-end screening: govern -> preprocess -> classify -> verdict.

Everything runs in-process; nothing is sent anywhere.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..eqo import DeviceState, GovernorPolicy, decide, working_set_estimate
from ..errors import InsufficientMemoryError, ScreeningError
from ..ptq import QuantModel
from ..runtime import parallel_forward
from ..tensor import FloatTensor
from .image import preprocess


class Verdict(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class Thresholds:
    """A class wins only with probability >= ``pos`` and a lead >= ``margin`` over the runner-up."""

    pos: float = 0.5
    margin: float = 0.1


@dataclass(frozen=True)
class ScreeningResult:
    class_probabilities: list
    verdict: Verdict
    top_label: str
    confidence: float
    latency_ms: float
    mode_used: str
    core_budget_used: int

    def to_json(self) -> dict:
        return {
            "class_probabilities": list(self.class_probabilities),
            "verdict": self.verdict.value,
            "top_label": self.top_label,
            "confidence": self.confidence,
            "latency_ms": self.latency_ms,
            "mode_used": self.mode_used,
            "core_budget_used": self.core_budget_used,
        }


def verdict_for(probs: Sequence[float], labels: Sequence[str], positive_label: str,
                thresholds: Thresholds = Thresholds()) -> Verdict:
    order = np.argsort(-np.asarray(probs, dtype=np.float64), kind="stable")
    top = float(probs[order[0]])
    runner_up = float(probs[order[1]]) if len(order) > 1 else 0.0
    if top < thresholds.pos or top - runner_up < thresholds.margin:
        return Verdict.UNCERTAIN
    return Verdict.POSITIVE if labels[order[0]] == positive_label else Verdict.NEGATIVE


def screen(
    m: QuantModel,
    img: FloatTensor,
    state: DeviceState,
    policy: GovernorPolicy = GovernorPolicy(),
    thresholds: Thresholds = Thresholds(),
    positive_label: Optional[str] = None,
) -> ScreeningResult:
    """Screen one image.

    The governor only picks the core budget; class probabilities do not depend
    on ``state``. ``positive_label`` defaults to the model's first class label.

    Raises:
        ScreeningError: the model has no softmax head or lacks the positive label.
        InsufficientMemoryError: free memory is below the model's working set.
    """
    if not m.ends_in_softmax:
        raise ScreeningError("screening needs a model ending in Softmax")
    if not m.class_labels:
        raise ScreeningError("model carries no class labels")
    positive_label = m.class_labels[0] if positive_label is None else positive_label
    if positive_label not in m.class_labels:
        raise ScreeningError(f"positive label {positive_label!r} not in {list(m.class_labels)}")
    ws = working_set_estimate(m)
    if state.available_memory_bytes < ws:
        raise InsufficientMemoryError(
            f"{state.available_memory_bytes} bytes available, model needs {ws}"
        )
    decision = decide(policy, state, ws)
    t0 = time.perf_counter()
    x = preprocess(img, m.input_shape)
    probs = parallel_forward(m, x, decision.core_budget).data
    latency = time.perf_counter() - t0
    top = int(np.argmax(probs))
    return ScreeningResult(
        class_probabilities=[float(p) for p in probs],
        verdict=verdict_for(probs, m.class_labels, positive_label, thresholds),
        top_label=m.class_labels[top],
        confidence=float(probs[top]),
        latency_ms=latency * 1e3,
        mode_used=decision.mode.value,
        core_budget_used=decision.core_budget,
    )
