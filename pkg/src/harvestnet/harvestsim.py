"""Discrete-time simulation of adaptive inference on harvested energy.

Each step of length ``dt`` charges the capacitor at the trace's rate. While
idle the scheduler waits until stored energy reaches the energy threshold of
the precision chosen from the current charging rate, then starts an
inference with that precision latched. A running stage drains
``e_mac / delay_mac`` watts for ``stage_macs * delay_mac`` seconds; stage
boundaries are resolved inside a step, so short Q4 inferences can complete
several times per step. At EE1 and EE2 the energy check runs first and the
confidence check second; the main exit always accepts.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .eats import (
    EnergyState,
    ExitDecision,
    GateDecision,
    HardwareProfile,
    PrecisionLatch,
    SchedulerThresholds,
    decide_at_exit,
    select_precision,
    start_gate,
)
from .errors import ParseError, ValidationError
from .exitpolicy import ExitThresholds, confidence, should_exit
from .netgraph.counting import stage_macs
from .netgraph.engine import SegmentRunner, softmax
from .netgraph.graph import EXIT_NAMES
from .quantizer import BitWidth

REPORT_SCHEMA = "harvestnet.simreport/1"
DEFAULT_DT = 1e-3
IDLE = "idle"


@dataclass(frozen=True)
class HarvestTrace:
    t: np.ndarray
    r_c: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        r = np.asarray(self.r_c, dtype=np.float64)
        if t.ndim != 1 or t.shape != r.shape or t.size == 0:
            raise ValidationError("trace needs matching, non-empty time and rate columns")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
            raise ValidationError("trace values must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("trace timestamps must be strictly increasing")
        if np.any(r < 0):
            raise ValidationError("charging rate must be non-negative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r_c", r)

    def __len__(self):
        return self.t.size

    def resample(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        n = int(math.floor((self.t[-1] - self.t[0]) / dt + 1e-9)) + 1
        grid = self.t[0] + dt * np.arange(n)
        return grid, np.interp(grid, self.t, self.r_c)


def load_trace(path) -> HarvestTrace:
    """Read ``t_seconds,charge_rate_watts`` rows; a header line is optional."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read trace: {e.strerror}", path) from None
    ts, rs = [], []
    for lineno, rec in enumerate(csv.reader(text.splitlines()), start=1):
        if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
            continue
        if len(rec) != 2:
            raise ParseError(f"expected 2 fields, got {len(rec)}", path, lineno)
        try:
            t, r = float(rec[0]), float(rec[1])
        except ValueError:
            if not ts and lineno == 1:
                continue  # header
            raise ParseError(f"non-numeric row {','.join(rec)!r}", path, lineno) from None
        if not (math.isfinite(t) and math.isfinite(r)):
            raise ParseError("non-finite value", path, lineno)
        if r < 0:
            raise ParseError(f"negative charging rate {r}", path, lineno)
        if ts and t <= ts[-1]:
            raise ParseError(f"timestamp {t} is not after {ts[-1]}", path, lineno)
        ts.append(t)
        rs.append(r)
    if not ts:
        raise ParseError("trace is empty", path)
    return HarvestTrace(np.array(ts), np.array(rs))


def save_trace(trace: HarvestTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t_seconds", "charge_rate_watts"])
        for t, r in zip(trace.t, trace.r_c):
            w.writerow([repr(float(t)), repr(float(r))])


def synth_trace(kind: str, params: dict, duration: float, dt: float) -> HarvestTrace:
    """Deterministic synthetic charging profile.

    * ``constant``: ``{"level"}``
    * ``step``: ``{"levels": [...], "times": [...]}``; level ``i`` holds from
      ``times[i]`` (``times[0]`` is usually 0)
    * ``sinusoid``: ``{"offset", "amplitude", "period", "phase"=0}``, clamped at 0
    """
    if duration <= 0 or dt <= 0:
        raise ValidationError("duration and dt must be positive")
    n = int(math.floor(duration / dt + 1e-9)) + 1
    t = dt * np.arange(n)
    if kind == "constant":
        r = np.full(n, float(params.get("level", 0.0)))
    elif kind == "step":
        levels = [float(v) for v in params["levels"]]
        times = [float(v) for v in params.get("times", [duration * i / len(levels) for i in range(len(levels))])]
        if len(times) != len(levels):
            raise ValidationError("step trace needs one time per level")
        idx = np.searchsorted(np.asarray(times), t, side="right") - 1
        r = np.asarray(levels)[np.clip(idx, 0, len(levels) - 1)]
    elif kind == "sinusoid":
        period = float(params["period"])
        if period <= 0:
            raise ValidationError("period must be positive")
        r = float(params.get("offset", 0.0)) + float(params.get("amplitude", 1.0)) * np.sin(
            2 * np.pi * t / period + float(params.get("phase", 0.0))
        )
        r = np.maximum(r, 0.0)
    else:
        raise ValidationError(f"unknown trace kind {kind!r}; expected sinusoid, step or constant")
    return HarvestTrace(t, r)


def step_energy(state, r_c: float, consumption_j: float, dt: float):
    """Advance stored energy by one step; returns ``(new_state, clamp)``.

    ``clamp`` is ``"empty"`` when the store hit zero, ``"full"`` when it hit
    capacity, else ``None``.
    """
    if dt <= 0:
        raise ValidationError("dt must be positive")
    if consumption_j < 0:
        raise ValidationError("consumption must be non-negative")
    raw = state.e_sys + r_c * dt - consumption_j
    clamp = None
    if raw < 0:
        raw, clamp = 0.0, "empty"
    elif raw > state.e_cap:
        raw, clamp = state.e_cap, "full"
    return EnergyState(raw, r_c, state.e_cap), clamp


class EventKind(enum.Enum):
    POWER_ON = "PowerOn"
    START_INFERENCE = "StartInference"
    EXIT_TAKEN = "ExitTaken"
    POWER_OFF = "PowerOff"
    PRECISION_LEVEL_CHANGE = "PrecisionLevelChange"
    ENERGY_DEPLETED = "EnergyDepletedMidSegment"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    precision: str | None = None
    exit: str | None = None
    reason: str | None = None
    inference: int | None = None
    energy: float | None = None  # stored energy when the event fired

    def to_dict(self) -> dict:
        d = {"time": self.time, "kind": self.kind.value}
        for k in ("precision", "exit", "reason", "inference", "energy"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimEvent":
        return cls(d["time"], EventKind(d["kind"]), d.get("precision"), d.get("exit"), d.get("reason"),
                   d.get("inference"), d.get("energy"))


@dataclass
class SimConfig:
    hardware: HardwareProfile
    thresholds: SchedulerThresholds
    network: object
    weights: dict  # BitWidth -> WeightSet
    exit_thresholds: object  # ExitThresholds, or dict BitWidth -> ExitThresholds
    dt: float = DEFAULT_DT
    e_cap: float = 1.0
    e_init: float = 0.0
    seed: int = 0
    inputs: np.ndarray | None = None  # optional fixed input stream, cycled

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.e_cap <= 0:
            raise ValidationError("e_cap must be positive")
        if not 0 <= self.e_init <= self.e_cap:
            raise ValidationError(f"e_init must lie in [0, e_cap={self.e_cap}]")
        missing = [bw.name for bw in BitWidth if bw not in self.weights]
        if missing:
            raise ValidationError(f"simulation needs weight sets for {', '.join(missing)}")
        for ws in self.weights.values():
            ws.validate(self.network)

    def exit_thresholds_for(self, bw: BitWidth) -> ExitThresholds:
        t = self.exit_thresholds
        if isinstance(t, ExitThresholds):
            return t
        if bw in t:
            return t[bw]
        raise ValidationError(f"no exit thresholds for {bw.name}")


@dataclass
class SimResult:
    events: list
    t: np.ndarray
    rate: np.ndarray
    precision: list
    energy: np.ndarray
    exits: list
    consumed: np.ndarray
    clamp: list
    thresholds: SchedulerThresholds
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        counts = {f"{e}/{r}": 0 for e in EXIT_NAMES for r in ("Confidence", "Energy")}
        starts = {bw.name: 0 for bw in BitWidth}
        depleted = 0
        for ev in self.events:
            if ev.kind is EventKind.EXIT_TAKEN:
                counts[f"{ev.exit}/{ev.reason}"] += 1
            elif ev.kind is EventKind.START_INFERENCE:
                starts[ev.precision] += 1
            elif ev.kind is EventKind.ENERGY_DEPLETED:
                depleted += 1
        return {"inferences": sum(starts.values()), "starts": starts, "exits": counts, "depleted": depleted}


class _InputStream:
    def __init__(self, shape, seed, fixed=None):
        self.rng = np.random.default_rng(seed)
        self.shape = shape
        self.fixed = fixed
        self.k = 0

    def next(self):
        self.k += 1
        if self.fixed is not None:
            return self.fixed[(self.k - 1) % len(self.fixed)]
        return self.rng.standard_normal(self.shape)


def run_simulation(config: SimConfig, trace: HarvestTrace) -> SimResult:
    net = config.network
    hw = config.hardware
    thr = config.thresholds
    stages = stage_macs(net)
    dt = config.dt
    grid, rates = trace.resample(dt)
    n = grid.size
    e_th_min = min(thr.e_th.values())
    stream = _InputStream(net.input_shape, config.seed, config.inputs)

    energy = np.empty(n)
    consumed = np.empty(n)
    prec_series = []
    exit_series = []
    clamp_series = []
    events = []

    e_sys = config.e_init
    latch = PrecisionLatch()
    powered = False
    runner = None
    stage = 0
    seg_left = 0.0
    draw = 0.0
    selected = None
    inference_id = 0

    def emit(t, kind, **kw):
        events.append(SimEvent(float(t), kind, **kw))

    def finish(t, exit_idx, reason):
        nonlocal runner, powered
        bw = latch.release()
        emit(t, EventKind.EXIT_TAKEN, precision=bw.name, exit=EXIT_NAMES[exit_idx], reason=reason,
             inference=inference_id, energy=e_sys)
        step_exits.append(EXIT_NAMES[exit_idx])
        runner = None
        if e_sys < e_th_min:
            emit(t, EventKind.POWER_OFF)
            powered = False

    for k in range(n):
        t0 = float(grid[k])
        rc = float(rates[k])
        sel = select_precision(rc, thr)
        if selected is not None and sel is not selected:
            emit(t0, EventKind.PRECISION_LEVEL_CHANGE, precision=sel.name)
        selected = sel
        step_exits = []
        active_in_step = latch.active
        used = 0.0
        clamp = None
        tau = 0.0
        while tau < dt:
            t = t0 + tau
            if latch.active is None:
                bw = select_precision(rc, thr)
                if start_gate(e_sys, thr.e_th[bw]) is GateDecision.START:
                    if not powered:
                        emit(t, EventKind.POWER_ON)
                        powered = True
                    latch.start(bw)
                    inference_id += 1
                    active_in_step = bw
                    emit(t, EventKind.START_INFERENCE, precision=bw.name, inference=inference_id, energy=e_sys)
                    runner = SegmentRunner(net, config.weights[bw], stream.next(), bw)
                    stage = 0
                    seg_left = stages[0] * hw.delay_mac[bw]
                    draw = hw.power(bw)
                    continue
                h = dt - tau
                e_sys += rc * h
                if e_sys > config.e_cap:
                    e_sys, clamp = config.e_cap, "full"
                tau = dt
                continue

            bw = latch.active
            h = min(dt - tau, seg_left)
            if e_sys + (rc - draw) * h < 0:
                h_dead = e_sys / (draw - rc)
                used += draw * h_dead
                e_sys = 0.0
                clamp = "empty"
                tau += h_dead
                latch.release()
                runner = None
                emit(t0 + tau, EventKind.ENERGY_DEPLETED, precision=bw.name, exit=EXIT_NAMES[stage],
                     inference=inference_id)
                emit(t0 + tau, EventKind.POWER_OFF)
                powered = False
                continue
            e_sys += (rc - draw) * h
            used += draw * h
            if e_sys > config.e_cap:
                e_sys, clamp = config.e_cap, "full"
            if seg_left < dt - tau:
                tau += seg_left
                seg_left = 0.0
            else:
                seg_left -= dt - tau
                tau = dt
            if seg_left > 0.0:
                continue

            # reached the exit after stage `stage`
            t = t0 + tau
            probs = softmax(runner.advance())
            if stage == 2:
                finish(t, 2, "Confidence")
                continue
            if decide_at_exit(e_sys, thr.e_th[bw]) is ExitDecision.TERMINATE_HERE:
                finish(t, stage, "Energy")
                continue
            if should_exit(confidence(probs), config.exit_thresholds_for(bw)[stage]):
                finish(t, stage, "Confidence")
                continue
            stage += 1
            seg_left = stages[stage] * hw.delay_mac[bw]

        energy[k] = e_sys
        consumed[k] = used
        prec_series.append(active_in_step.name if active_in_step is not None else IDLE)
        exit_series.append("+".join(step_exits))
        clamp_series.append(clamp or "")

    return SimResult(
        events=events,
        t=grid,
        rate=rates,
        precision=prec_series,
        energy=energy,
        exits=exit_series,
        consumed=consumed,
        clamp=clamp_series,
        thresholds=thr,
        meta={"dt": dt, "e_cap": config.e_cap, "e_init": config.e_init, "seed": config.seed,
              "stage_macs": list(stages)},
    )


def _thresholds_dict(thr: SchedulerThresholds) -> dict:
    return {"r_th1": thr.r_th1, "r_th2": thr.r_th2, "e_th": {bw.name: thr.e_th[bw] for bw in BitWidth}}


def report_dict(result: SimResult) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "meta": result.meta,
        "thresholds": _thresholds_dict(result.thresholds),
        "summary": result.summary(),
        "series": {
            "t": result.t.tolist(),
            "rate": result.rate.tolist(),
            "precision": list(result.precision),
            "energy": result.energy.tolist(),
            "exits": list(result.exits),
            "consumed": result.consumed.tolist(),
            "clamp": list(result.clamp),
        },
        "events": [e.to_dict() for e in result.events],
    }


def export_report(result: SimResult, path) -> None:
    """Write the JSON report plus ``<stem>_series.csv`` and ``<stem>_events.csv``."""
    path = Path(path)
    path.write_text(json.dumps(report_dict(result), separators=(",", ":")) + "\n", encoding="utf-8")
    write_series_csv(report_dict(result), path.with_name(path.stem + "_series.csv"))
    write_events_csv(report_dict(result), path.with_name(path.stem + "_events.csv"))


def write_series_csv(report: dict, path) -> None:
    s = report["series"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["t", "rate_w", "precision", "energy_j", "exits", "consumed_j", "clamp"])
        for row in zip(s["t"], s["rate"], s["precision"], s["energy"], s["exits"], s["consumed"], s["clamp"]):
            t, r, p, e, x, c, cl = row
            w.writerow([f"{t:.6f}", f"{r:.9e}", p, f"{e:.9e}", x, f"{c:.9e}", cl])


def write_events_csv(report: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["time", "kind", "precision", "exit", "reason", "inference", "energy_j"])
        for e in report["events"]:
            energy = e.get("energy")
            w.writerow([f"{e['time']:.6f}", e["kind"], e.get("precision", ""), e.get("exit", ""),
                        e.get("reason", ""), e.get("inference", ""), "" if energy is None else f"{energy:.9e}"])


def load_report(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read report: {e.strerror}", path) from None
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    if d.get("schema") != REPORT_SCHEMA:
        raise ParseError(f"expected schema {REPORT_SCHEMA!r}", path)
    d["events"] = [SimEvent.from_dict(e) for e in d["events"]]
    return d
