"""Energy-aware task scheduler.

Two decisions drive adaptive inference on harvested energy:

* precision, picked from the charging rate against two rate thresholds
  before an inference starts and held until it ends;
* depth, checked at every early exit: if the capacitor no longer holds
  enough energy to finish the next stage the inference stops there.

Rate thresholds are ``kappa * f_max * n_mac * e_mac``. The lower one uses
the Q8 energy per MAC, the upper one FP32. The energy threshold for a
precision is ``kappa * e_mac * max(stage MACs)``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError
from .quantizer import BitWidth

DEFAULT_KAPPA = 1.2
SCHED_SCHEMA = "harvestnet.scheduler/1"


class ExitDecision(enum.Enum):
    CONTINUE = "Continue"
    TERMINATE_HERE = "TerminateHere"


class GateDecision(enum.Enum):
    START = "Start"
    WAIT = "Wait"


def _per_precision(d, what) -> dict:
    out = {}
    for k, v in dict(d).items():
        out[BitWidth.parse(k)] = float(v)
    missing = set(BitWidth) - set(out)
    if missing:
        raise ValidationError(f"{what} missing entries for {sorted(m.name for m in missing)}")
    return out


@dataclass(frozen=True)
class HardwareProfile:
    e_mac: dict
    delay_mac: dict
    f_max: float = 1.0
    kappa_rate: float = DEFAULT_KAPPA
    kappa_energy: float = DEFAULT_KAPPA

    def __post_init__(self):
        e = _per_precision(self.e_mac, "e_mac")
        d = _per_precision(self.delay_mac, "delay_mac")
        object.__setattr__(self, "e_mac", e)
        object.__setattr__(self, "delay_mac", d)
        for name, m in (("e_mac", e), ("delay_mac", d)):
            if min(m.values()) <= 0:
                raise ValidationError(f"{name} entries must be positive")
            if not m[BitWidth.Q4] <= m[BitWidth.Q8] <= m[BitWidth.FP32]:
                raise ValidationError(f"{name} must satisfy Q4 <= Q8 <= FP32")
        if self.f_max <= 0:
            raise ValidationError("f_max must be positive")
        if self.kappa_rate < 1 or self.kappa_energy < 1:
            raise ValidationError("kappa values must be >= 1")

    def power(self, bw) -> float:
        """Average power drawn while computing at ``bw``."""
        bw = BitWidth.parse(bw)
        return self.e_mac[bw] / self.delay_mac[bw]


@dataclass(frozen=True)
class SchedulerThresholds:
    r_th1: float
    r_th2: float
    e_th: dict

    def __post_init__(self):
        e = _per_precision(self.e_th, "e_th")
        object.__setattr__(self, "e_th", e)
        if not 0 < self.r_th1 < self.r_th2:
            raise ValidationError(f"need 0 < r_th1 < r_th2, got {self.r_th1}, {self.r_th2}")
        if min(e.values()) <= 0:
            raise ValidationError("e_th entries must be positive")
        if not e[BitWidth.Q4] <= e[BitWidth.Q8] <= e[BitWidth.FP32]:
            raise ValidationError("e_th must satisfy Q4 <= Q8 <= FP32")


@dataclass
class EnergyState:
    e_sys: float
    r_c: float
    e_cap: float

    def __post_init__(self):
        if self.e_cap <= 0:
            raise ValidationError("e_cap must be positive")
        if not 0 <= self.e_sys <= self.e_cap:
            raise ValidationError(f"e_sys={self.e_sys} outside [0, {self.e_cap}]")


def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValidationError(f"{k} must be positive, got {v!r}")


def compute_rate_threshold(kappa, f_max, n_mac, e_mac) -> float:
    _positive(kappa=kappa, f_max=f_max, n_mac=n_mac, e_mac=e_mac)
    return kappa * f_max * n_mac * e_mac


def compute_energy_threshold(kappa, e_mac, n1, n2, n3) -> float:
    _positive(kappa=kappa, e_mac=e_mac, n1=n1, n2=n2, n3=n3)
    return kappa * e_mac * max(n1, n2, n3)


def select_precision(r_c: float, thresholds: SchedulerThresholds) -> BitWidth:
    if r_c < 0:
        raise ValidationError(f"charging rate must be non-negative, got {r_c}")
    if r_c >= thresholds.r_th2:
        return BitWidth.FP32
    if r_c >= thresholds.r_th1:
        return BitWidth.Q8
    return BitWidth.Q4


def decide_at_exit(e_sys: float, e_th: float) -> ExitDecision:
    if e_sys < 0:
        raise ValidationError("e_sys must be non-negative")
    return ExitDecision.CONTINUE if e_sys >= e_th else ExitDecision.TERMINATE_HERE


def start_gate(e_sys: float, e_th: float) -> GateDecision:
    if e_sys < 0:
        raise ValidationError("e_sys must be non-negative")
    return GateDecision.START if e_sys >= e_th else GateDecision.WAIT


def derive_thresholds(profile: HardwareProfile, total_macs: int, stage_macs) -> SchedulerThresholds:
    """Rate and energy thresholds for a network with the given MAC counts."""
    n1, n2, n3 = stage_macs
    return SchedulerThresholds(
        r_th1=compute_rate_threshold(profile.kappa_rate, profile.f_max, total_macs, profile.e_mac[BitWidth.Q8]),
        r_th2=compute_rate_threshold(profile.kappa_rate, profile.f_max, total_macs, profile.e_mac[BitWidth.FP32]),
        e_th={bw: compute_energy_threshold(profile.kappa_energy, profile.e_mac[bw], n1, n2, n3) for bw in BitWidth},
    )


class PrecisionLatch:
    """Holds the precision chosen at the start of an inference until it ends."""

    def __init__(self):
        self.active = None

    def start(self, bw: BitWidth) -> BitWidth:
        if self.active is not None:
            raise ValidationError("an inference is already running")
        self.active = bw
        return bw

    def release(self) -> BitWidth:
        bw, self.active = self.active, None
        return bw


@dataclass
class SchedulerConfig:
    """Parsed scheduler configuration file.

    ``overrides`` may pin ``r_th1``, ``r_th2`` and/or a per-precision
    ``e_th`` map; anything not pinned is derived from the profile.
    ``simulation`` carries ``dt``, ``e_cap`` and ``e_init``.
    """

    profile: HardwareProfile
    overrides: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)

    def thresholds(self, total_macs, stage_macs) -> SchedulerThresholds:
        derived = derive_thresholds(self.profile, total_macs, stage_macs)
        o = self.overrides
        e_th = dict(derived.e_th)
        for k, v in o.get("e_th", {}).items():
            e_th[BitWidth.parse(k)] = float(v)
        return SchedulerThresholds(
            r_th1=float(o.get("r_th1", derived.r_th1)),
            r_th2=float(o.get("r_th2", derived.r_th2)),
            e_th=e_th,
        )

    def to_dict(self) -> dict:
        p = self.profile
        d = {
            "schema": SCHED_SCHEMA,
            "e_mac": {bw.name: p.e_mac[bw] for bw in BitWidth},
            "delay_mac": {bw.name: p.delay_mac[bw] for bw in BitWidth},
            "f_max": p.f_max,
            "kappa_rate": p.kappa_rate,
            "kappa_energy": p.kappa_energy,
        }
        if self.overrides:
            d["overrides"] = self.overrides
        if self.simulation:
            d["simulation"] = self.simulation
        return d


_TOP_KEYS = {"schema", "e_mac", "delay_mac", "f_max", "kappa_rate", "kappa_energy", "overrides", "simulation"}
_OVERRIDE_KEYS = {"r_th1", "r_th2", "e_th"}
_SIM_KEYS = {"dt", "e_cap", "e_init"}


def scheduler_config_from_dict(d: dict) -> SchedulerConfig:
    if d.get("schema", SCHED_SCHEMA) != SCHED_SCHEMA:
        raise ValidationError(f"scheduler config schema must be {SCHED_SCHEMA!r}")
    for keys, section, allowed in ((set(d), "top level", _TOP_KEYS),
                                   (set(d.get("overrides", {})), "overrides", _OVERRIDE_KEYS),
                                   (set(d.get("simulation", {})), "simulation", _SIM_KEYS)):
        unknown = keys - allowed
        if unknown:
            raise ValidationError(f"unknown scheduler config key(s) in {section}: {', '.join(sorted(unknown))}")
    try:
        profile = HardwareProfile(
            e_mac=d["e_mac"],
            delay_mac=d["delay_mac"],
            f_max=float(d.get("f_max", 1.0)),
            kappa_rate=float(d.get("kappa_rate", DEFAULT_KAPPA)),
            kappa_energy=float(d.get("kappa_energy", DEFAULT_KAPPA)),
        )
    except KeyError as e:
        raise ValidationError(f"scheduler config missing key {e.args[0]!r}") from None
    return SchedulerConfig(profile, dict(d.get("overrides", {})), dict(d.get("simulation", {})))


def load_scheduler_config(path) -> SchedulerConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read scheduler config: {e.strerror}", path) from None
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    return scheduler_config_from_dict(d)


def save_scheduler_config(cfg: SchedulerConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
