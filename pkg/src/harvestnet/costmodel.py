"""Per-precision power, delay and PDP estimates for each exit stage.

Costs are linear in the MAC count of a stage. A profile is fitted from
measured ``(exit, precision, power, delay)`` rows plus the cumulative MAC
count of each exit, with one least-squares slope through the origin per
quantity and precision.

Two power models are available. ``average`` treats power as energy over
delay, so power is the same for every stage of a precision. ``proportional``
lets power grow with the stage's MAC count, which is how the reference FPGA
measurements below behave (more DSP slices are active for larger stages).
Both keep ``pdp == power * delay``.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

from .eats import DEFAULT_KAPPA, HardwareProfile
from .errors import ParseError, ValidationError
from .quantizer import BitWidth

EXITS = ("EE1", "EE2", "ME")
PDP_TOLERANCE = 0.02

# Artix-7 DSP48E1 measurements: (exit, precision, power, delay, pdp) in table units.
REFERENCE_TABLE = {
    "resnet18": [
        ("EE1", "FP32", 9.36e0, 8.92e-2, 8.34e-1),
        ("EE2", "FP32", 1.72e1, 1.64e-1, 2.81e0),
        ("ME", "FP32", 3.28e1, 3.13e-1, 1.03e1),
        ("EE1", "Q8", 2.17e0, 1.49e-2, 3.22e-2),
        ("EE2", "Q8", 3.98e0, 2.73e-2, 1.09e-1),
        ("ME", "Q8", 7.61e0, 5.21e-2, 3.96e-1),
        ("EE1", "Q4", 1.16e0, 7.43e-3, 8.65e-3),
        ("EE2", "Q4", 2.14e0, 1.36e-2, 2.91e-2),
        ("ME", "Q4", 4.08e0, 2.61e-2, 1.06e-1),
    ],
    "densenet121": [
        ("EE1", "FP32", 2.23e1, 2.13e-1, 4.74e0),
        ("EE2", "FP32", 3.59e1, 3.42e-1, 1.23e1),
        ("ME", "FP32", 3.78e1, 3.60e-1, 1.36e1),
        ("EE1", "Q8", 5.17e0, 3.54e-2, 1.83e-1),
        ("EE2", "Q8", 8.31e0, 5.70e-2, 4.74e-1),
        ("ME", "Q8", 8.77e0, 6.01e-2, 5.27e-1),
        ("EE1", "Q4", 2.78e0, 1.77e-2, 4.92e-2),
        ("EE2", "Q4", 4.46e0, 2.85e-2, 1.27e-1),
        ("ME", "Q4", 4.71e0, 3.00e-2, 1.41e-1),
    ],
}

# Cumulative MACs to each exit of the measured networks.
REFERENCE_MACS = {
    "resnet18": {"EE1": 4.02e7, "EE2": 7.37e7, "ME": 1.41e8},
    "densenet121": {"EE1": 9.57e7, "EE2": 1.54e8, "ME": 1.62e8},
}


class PowerModel(enum.Enum):
    AVERAGE = "average"
    PROPORTIONAL = "proportional"


@dataclass(frozen=True)
class CalibrationRow:
    exit: str
    precision: BitWidth
    power: float
    delay: float
    pdp: float | None = None

    @property
    def computed_pdp(self) -> float:
        return self.power * self.delay


@dataclass(frozen=True)
class PrecisionCost:
    packing_factor: int
    delay_mac: float  # s per MAC
    e_mac: float  # J per MAC
    power_mac: float  # W per MAC of stage size (proportional model)


@dataclass(frozen=True)
class StageCost:
    exit: str
    precision: BitWidth
    macs: float
    power: float
    delay: float
    pdp: float


@dataclass
class CostProfile:
    costs: dict
    power_model: PowerModel = PowerModel.AVERAGE
    residuals: list = field(default_factory=list)
    delay_unit: float = 1.0

    def __getitem__(self, bw) -> PrecisionCost:
        return self.costs[BitWidth.parse(bw)]

    def to_hardware_profile(self, f_max=1.0, kappa_rate=DEFAULT_KAPPA, kappa_energy=DEFAULT_KAPPA) -> HardwareProfile:
        return HardwareProfile(
            e_mac={bw: c.e_mac for bw, c in self.costs.items()},
            delay_mac={bw: c.delay_mac for bw, c in self.costs.items()},
            f_max=f_max,
            kappa_rate=kappa_rate,
            kappa_energy=kappa_energy,
        )


def reference_rows(network: str) -> list[CalibrationRow]:
    try:
        rows = REFERENCE_TABLE[network]
    except KeyError:
        raise ValidationError(f"no reference table for {network!r}; choose from {sorted(REFERENCE_TABLE)}") from None
    return [CalibrationRow(e, BitWidth.parse(p), pw, d, pdp) for e, p, pw, d, pdp in rows]


def load_calibration_table(path) -> list[CalibrationRow]:
    """Rows ``exit,precision,power,delay[,pdp]``; a header line is optional."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read calibration table: {e.strerror}", path) from None
    rows = []
    for lineno, rec in enumerate(csv.reader(text.splitlines()), start=1):
        if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
            continue
        rec = [c.strip() for c in rec]
        if lineno == 1 and rec[0].lower() == "exit":
            continue
        if len(rec) not in (4, 5):
            raise ParseError(f"expected 4 or 5 fields, got {len(rec)}", path, lineno)
        if rec[0] not in EXITS:
            raise ParseError(f"unknown exit {rec[0]!r}", path, lineno)
        try:
            bw = BitWidth.parse(rec[1])
            nums = [float(v) for v in rec[2:]]
        except (ValueError, ValidationError) as e:
            raise ParseError(str(e), path, lineno) from None
        if any(not math.isfinite(v) or v <= 0 for v in nums):
            raise ParseError("power, delay and pdp must be positive", path, lineno)
        rows.append(CalibrationRow(rec[0], bw, nums[0], nums[1], nums[2] if len(nums) == 3 else None))
    if not rows:
        raise ParseError("calibration table is empty", path)
    return rows


def write_calibration_table(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["exit", "precision", "power", "delay", "pdp"])
        for r in rows:
            w.writerow([r.exit, r.precision.name, f"{r.power:.6g}", f"{r.delay:.6g}",
                        "" if r.pdp is None else f"{r.pdp:.6g}"])


def pdp_relative_error(row: CalibrationRow) -> float:
    if row.pdp is None:
        return 0.0
    return abs(row.computed_pdp - row.pdp) / row.pdp


def _slope(xs, ys) -> float:
    return sum(x * y for x, y in zip(xs, ys)) / sum(x * x for x in xs)


def calibrate_profile(rows, macs_by_exit: dict, power_model=PowerModel.AVERAGE, delay_unit: float = 1.0) -> CostProfile:
    """Fit per-MAC delay, energy and power slopes for every precision.

    ``delay_unit`` converts the table's delay column to seconds.
    """
    power_model = PowerModel(power_model)
    rows = list(rows)
    for r in rows:
        if pdp_relative_error(r) > PDP_TOLERANCE:
            raise ValidationError(
                f"inconsistent units on row {r.exit}/{r.precision.name}: "
                f"power*delay={r.computed_pdp:.4g} vs pdp={r.pdp:.4g}"
            )
        if r.exit not in macs_by_exit:
            raise ValidationError(f"no MAC count for exit {r.exit!r}")
    by_bw = {bw: [r for r in rows if r.precision is bw] for bw in BitWidth}
    missing = [bw.name for bw, rs in by_bw.items() if not rs]
    if missing:
        raise ValidationError(f"calibration table needs at least one row for {', '.join(missing)}")

    fitted = {}
    for bw, rs in by_bw.items():
        m = [float(macs_by_exit[r.exit]) for r in rs]
        delay = [r.delay * delay_unit for r in rs]
        fitted[bw] = (
            _slope(m, delay),
            _slope(m, [r.power * d for r, d in zip(rs, delay)]),
            _slope(m, [r.power for r in rs]),
        )
    base_delay = fitted[BitWidth.FP32][0]
    costs = {
        bw: PrecisionCost(max(1, round(base_delay / d)), d, e, p) for bw, (d, e, p) in fitted.items()
    }
    profile = CostProfile(costs, power_model, [], delay_unit)
    for r in rows:
        sc = stage_cost_for_macs(macs_by_exit[r.exit], r.exit, r.precision, profile)
        profile.residuals.append({
            "exit": r.exit,
            "precision": r.precision.name,
            "delay_rel": (sc.delay - r.delay * delay_unit) / (r.delay * delay_unit),
            "power_rel": (sc.power - r.power) / r.power,
        })
    return profile


def stage_cost_for_macs(macs: float, exit: str, precision, profile: CostProfile) -> StageCost:
    bw = BitWidth.parse(precision)
    c = profile[bw]
    delay = macs * c.delay_mac
    if macs == 0:
        return StageCost(exit, bw, 0, 0.0, 0.0, 0.0)
    if profile.power_model is PowerModel.AVERAGE:
        power = (macs * c.e_mac) / delay
    else:
        power = macs * c.power_mac
    return StageCost(exit, bw, macs, power, delay, power * delay)


def stage_cost(net, exit_index: int, precision, profile: CostProfile) -> StageCost:
    from .netgraph.counting import count_macs

    return stage_cost_for_macs(count_macs(net, exit_index), EXITS[exit_index - 1], precision, profile)


def reduction(base: float, new: float) -> float:
    """Fractional reduction from ``base`` to ``new`` (0.875 means 87.5 %)."""
    if base == 0:
        return 0.0
    return 1.0 - new / base


def delay_ratio(rows, exit: str, slow=BitWidth.FP32, fast=BitWidth.Q4) -> float:
    by = {(r.exit, r.precision): r for r in rows}
    return by[(exit, BitWidth.parse(slow))].delay / by[(exit, BitWidth.parse(fast))].delay


def infer_packing_factor(rows, exit: str, bw) -> int:
    """MACs per DSP slice implied by the delay ratio against FP32 (one MAC per slice)."""
    return max(1, round(delay_ratio(rows, exit, BitWidth.FP32, bw)))


def reductions_from_stage_costs(stages) -> list[dict]:
    """FP32 versus Q8/Q4 reductions for each exit of a list of stage costs."""
    by = {(s.exit, s.precision): s for s in stages}
    out = []
    for e in EXITS:
        base = by.get((e, BitWidth.FP32))
        if base is None:
            continue
        for bw in BitWidth:
            s = by.get((e, bw))
            if s is None:
                continue
            out.append({
                "exit": e,
                "precision": bw.name,
                "power_reduction": reduction(base.power, s.power),
                "delay_reduction": reduction(base.delay, s.delay),
                "pdp_reduction": reduction(base.pdp, s.pdp),
            })
    return out


def rows_as_stage_costs(rows, macs_by_exit=None) -> list[StageCost]:
    """Measured rows as stage costs, with pdp recomputed as power * delay."""
    return [
        StageCost(r.exit, r.precision, (macs_by_exit or {}).get(r.exit, float("nan")),
                  r.power, r.delay, r.computed_pdp)
        for r in rows
    ]


def table_reductions(rows) -> list[dict]:
    return reductions_from_stage_costs(rows_as_stage_costs(rows))


def reduction_report(profile: CostProfile, net) -> list[dict]:
    stages = [stage_cost(net, e, bw, profile) for e in (1, 2, 3) for bw in BitWidth]
    return reductions_from_stage_costs(stages)
