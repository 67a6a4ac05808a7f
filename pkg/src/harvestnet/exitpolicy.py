"""Confidence-based early exit and per-exit threshold calibration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .netgraph.engine import SegmentRunner, softmax
from .netgraph.graph import EXIT_NAMES
from .quantizer import BitWidth

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(21))
THRESHOLDS_SCHEMA = "harvestnet.thresholds/1"


@dataclass(frozen=True)
class ExitThresholds:
    t1: float
    t2: float
    t3: float = 0.0

    def __post_init__(self):
        for v in (self.t1, self.t2, self.t3):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"thresholds must lie in [0, 1], got {self.as_tuple()}")
        if self.t3 != 0.0:
            raise ValidationError("the main exit threshold must be 0")

    def as_tuple(self):
        return (self.t1, self.t2, self.t3)

    def __getitem__(self, i):
        return self.as_tuple()[i]


@dataclass
class ExitDecisionTrace:
    confidences: list = field(default_factory=list)
    exit_taken: int = 0
    predicted: int = -1


def confidence(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("confidence expects a 1-D probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValidationError(f"not a probability vector (sum={p.sum():.9g})")
    return float(p.max())


def should_exit(c: float, t: float) -> bool:
    return c > t


def adaptive_inference(net, weights, x, thresholds: ExitThresholds, precision):
    """Evaluate exits in order and stop at the first confident one."""
    runner = SegmentRunner(net, weights, x, precision)
    trace = ExitDecisionTrace()
    for i in range(3):
        probs = softmax(runner.advance())
        c = confidence(probs)
        trace.confidences.append(c)
        if i == 2 or should_exit(c, thresholds[i]):
            trace.exit_taken = i + 1
            trace.predicted = int(np.argmax(probs))
            break
    return trace.predicted, trace.exit_taken, trace


def exit_outputs(net, weights, inputs, precision):
    """Confidences and predicted classes at all three exits for a batch.

    Returns two ``(N, 3)`` arrays. Calibration needs every exit for every
    sample, so this runs the whole network once in batch.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    runner = SegmentRunner(net, weights, inputs, precision)
    conf = np.empty((len(inputs), 3))
    pred = np.empty((len(inputs), 3), dtype=np.int64)
    for i in range(3):
        probs = softmax(runner.advance())
        conf[:, i] = probs.max(axis=1)
        pred[:, i] = probs.argmax(axis=1)
    return conf, pred


def route(conf: np.ndarray, thresholds) -> np.ndarray:
    """Exit index (1-3) each sample takes under the first-crossing rule."""
    t1, t2 = thresholds[0], thresholds[1]
    return np.where(conf[:, 0] > t1, 1, np.where(conf[:, 1] > t2, 2, 3))


def _adaptive_correct(conf, pred, labels, thresholds):
    taken = route(conf, thresholds)
    chosen = pred[np.arange(len(pred)), taken - 1]
    return int(np.sum(chosen == labels)), taken


@dataclass
class CalibrationReport:
    precision: str
    thresholds: ExitThresholds
    exit_rates: tuple
    exit_accuracy: tuple  # accuracy of the samples that left at each exit (nan if none)
    standalone_accuracy: tuple  # accuracy of each exit over the whole set
    adaptive_accuracy: float
    full_depth_accuracy: float
    max_accuracy_drop: float
    samples: int

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and np.isnan(v) else v
        return {
            "precision": self.precision,
            "thresholds": list(self.thresholds.as_tuple()),
            "exit_rates": dict(zip(EXIT_NAMES, self.exit_rates)),
            "exit_accuracy": {k: clean(v) for k, v in zip(EXIT_NAMES, self.exit_accuracy)},
            "standalone_accuracy": dict(zip(EXIT_NAMES, self.standalone_accuracy)),
            "adaptive_accuracy": self.adaptive_accuracy,
            "full_depth_accuracy": self.full_depth_accuracy,
            "max_accuracy_drop": self.max_accuracy_drop,
            "samples": self.samples,
        }


def calibrate_from_outputs(conf, pred, labels, max_accuracy_drop: float, precision="FP32") -> CalibrationReport:
    """Greedy grid search, EE1 first then EE2.

    Each threshold is the smallest grid value keeping the adaptive accuracy
    within ``max_accuracy_drop`` of running every sample to the main exit.
    While EE1 is searched nothing leaves at EE2.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValidationError("validation set is empty")
    if max_accuracy_drop < 0:
        raise ValidationError("max_accuracy_drop must be non-negative")
    full_correct = int(np.sum(pred[:, 2] == labels))
    # compare counts so the boundary is exact
    need = full_correct - max_accuracy_drop * n - 1e-9

    t1 = next(t for t in THRESHOLD_GRID if _adaptive_correct(conf, pred, labels, (t, 1.0))[0] >= need)
    t2 = next(t for t in THRESHOLD_GRID if _adaptive_correct(conf, pred, labels, (t1, t))[0] >= need)
    thr = ExitThresholds(t1, t2, 0.0)

    correct, taken = _adaptive_correct(conf, pred, labels, thr)
    rates, acc = [], []
    chosen = pred[np.arange(n), taken - 1]
    for e in (1, 2, 3):
        m = taken == e
        rates.append(float(m.sum()) / n)
        acc.append(float(np.mean(chosen[m] == labels[m])) if m.any() else float("nan"))
    standalone = tuple(float(np.mean(pred[:, i] == labels)) for i in range(3))
    return CalibrationReport(
        precision=BitWidth.parse(precision).name,
        thresholds=thr,
        exit_rates=tuple(rates),
        exit_accuracy=tuple(acc),
        standalone_accuracy=standalone,
        adaptive_accuracy=correct / n,
        full_depth_accuracy=full_correct / n,
        max_accuracy_drop=float(max_accuracy_drop),
        samples=n,
    )


def calibrate_thresholds(net, weights, inputs, labels, max_accuracy_drop: float, precision=None) -> CalibrationReport:
    if len(labels) == 0:
        raise ValidationError("validation set is empty")
    if max_accuracy_drop < 0:
        raise ValidationError("max_accuracy_drop must be non-negative")
    precision = weights.precision if precision is None else BitWidth.parse(precision)
    conf, pred = exit_outputs(net, weights, inputs, precision)
    return calibrate_from_outputs(conf, pred, labels, max_accuracy_drop, precision)


def save_thresholds(path, reports: list) -> None:
    doc = {
        "schema": THRESHOLDS_SCHEMA,
        "thresholds": {r.precision: list(r.thresholds.as_tuple()) for r in reports},
        "reports": [r.to_dict() for r in reports],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_thresholds(path) -> dict:
    """Per-precision thresholds from a thresholds file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read thresholds: {e.strerror}", path) from None
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    if doc.get("schema") != THRESHOLDS_SCHEMA:
        raise ParseError(f"expected schema {THRESHOLDS_SCHEMA!r}", path)
    return {BitWidth.parse(k): ExitThresholds(*v) for k, v in doc["thresholds"].items()}
