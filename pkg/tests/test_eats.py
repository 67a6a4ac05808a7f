import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harvestnet.eats import (
    EnergyState,
    ExitDecision,
    GateDecision,
    HardwareProfile,
    PrecisionLatch,
    SchedulerThresholds,
    compute_energy_threshold,
    compute_rate_threshold,
    decide_at_exit,
    derive_thresholds,
    load_scheduler_config,
    save_scheduler_config,
    scheduler_config_from_dict,
    select_precision,
    start_gate,
)
from harvestnet.errors import ParseError, ValidationError
from harvestnet.quantizer import BitWidth

PROFILE = HardwareProfile({"Q4": 1e-10, "Q8": 2e-10, "FP32": 1e-9}, {"Q4": 1e-9, "Q8": 2e-9, "FP32": 1e-8})


def _thr(r1, r2):
    return SchedulerThresholds(r1, r2, {"Q4": 1.0, "Q8": 2.0, "FP32": 3.0})


def test_rate_threshold_formula():
    assert math.isclose(compute_rate_threshold(1.2, 10.0, 1e6, 1e-9), 1.2e-2)
    with pytest.raises(ValidationError):
        compute_rate_threshold(1.2, 0.0, 1e6, 1e-9)


def test_energy_threshold_from_table_counts():
    # segment MACs differenced from cumulative 4.02e7, 7.37e7, 1.41e8
    n1, n2, n3 = 4.02e7, 7.37e7 - 4.02e7, 1.41e8 - 7.37e7
    assert math.isclose(compute_energy_threshold(1.0, 1e-9, n1, n2, n3), 6.73e-2, rel_tol=1e-12)
    assert math.isclose(compute_energy_threshold(1.2, 1e-9, n1, n2, n3), 1.2 * 6.73e-2, rel_tol=1e-12)


def test_precision_boundaries():
    t = _thr(1.0, 2.0)
    assert select_precision(0.0, t) is BitWidth.Q4
    assert select_precision(math.nextafter(1.0, 0), t) is BitWidth.Q4
    assert select_precision(1.0, t) is BitWidth.Q8
    assert select_precision(math.nextafter(2.0, 0), t) is BitWidth.Q8
    assert select_precision(2.0, t) is BitWidth.FP32
    with pytest.raises(ValidationError):
        select_precision(-1e-9, t)


@given(st.floats(1e-6, 1e3), st.floats(1.0001, 1e3), st.lists(st.floats(0, 1e6), min_size=2, max_size=20))
def test_select_precision_monotone(r1, factor, rates):
    t = _thr(r1, r1 * factor)
    levels = [select_precision(r, t) for r in sorted(rates)]
    assert all(a <= b for a, b in zip(levels, levels[1:]))


def test_gate_and_exit_decisions_inclusive():
    assert start_gate(1.0, 1.0) is GateDecision.START
    assert start_gate(math.nextafter(1.0, 0), 1.0) is GateDecision.WAIT
    assert decide_at_exit(1.0, 1.0) is ExitDecision.CONTINUE
    assert decide_at_exit(0.5, 1.0) is ExitDecision.TERMINATE_HERE
    with pytest.raises(ValidationError):
        decide_at_exit(-1.0, 1.0)


def test_latch():
    latch = PrecisionLatch()
    latch.start(BitWidth.Q8)
    with pytest.raises(ValidationError):
        latch.start(BitWidth.FP32)
    assert latch.release() is BitWidth.Q8 and latch.active is None


def test_derive_thresholds_ordering():
    thr = derive_thresholds(PROFILE, 1000, (400, 300, 300))
    assert math.isclose(thr.r_th1, 1.2 * 1000 * 2e-10)
    assert math.isclose(thr.r_th2, 1.2 * 1000 * 1e-9)
    assert math.isclose(thr.e_th[BitWidth.Q4], 1.2 * 1e-10 * 400)
    assert thr.e_th[BitWidth.Q4] < thr.e_th[BitWidth.Q8] < thr.e_th[BitWidth.FP32]


def test_profile_and_state_validation():
    with pytest.raises(ValidationError):
        HardwareProfile({"Q4": 2e-10, "Q8": 1e-10, "FP32": 1e-9}, PROFILE.delay_mac)
    with pytest.raises(ValidationError):
        HardwareProfile({"Q4": 1e-10, "Q8": 2e-10}, PROFILE.delay_mac)
    with pytest.raises(ValidationError):
        HardwareProfile(PROFILE.e_mac, PROFILE.delay_mac, kappa_rate=0.9)
    with pytest.raises(ValidationError):
        SchedulerThresholds(2.0, 1.0, {"Q4": 1, "Q8": 2, "FP32": 3})
    with pytest.raises(ValidationError):
        EnergyState(2.0, 0.0, 1.0)
    assert math.isclose(PROFILE.power("Q8"), 0.1)


def test_config_round_trip_and_overrides(tmp_path):
    d = {
        "e_mac": {"Q4": 1e-10, "Q8": 2e-10, "FP32": 1e-9},
        "delay_mac": {"Q4": 1e-9, "Q8": 2e-9, "FP32": 1e-8},
        "f_max": 5.0,
        "overrides": {"r_th1": 5e-7, "e_th": {"FP32": 9.0}},
        "simulation": {"dt": 0.002},
    }
    cfg = scheduler_config_from_dict(d)
    thr = cfg.thresholds(1000, (400, 300, 300))
    assert thr.r_th1 == 5e-7 and thr.e_th[BitWidth.FP32] == 9.0
    assert math.isclose(thr.r_th2, 1.2 * 5 * 1000 * 1e-9)
    save_scheduler_config(cfg, tmp_path / "s.json")
    assert load_scheduler_config(tmp_path / "s.json").to_dict() == cfg.to_dict()


def test_config_unknown_key_is_named(tmp_path):
    base = {"e_mac": {"Q4": 1e-10, "Q8": 2e-10, "FP32": 1e-9}, "delay_mac": {"Q4": 1e-9, "Q8": 2e-9, "FP32": 1e-8}}
    with pytest.raises(ValidationError, match="kappa"):
        scheduler_config_from_dict({**base, "kappa": 2})
    with pytest.raises(ValidationError, match="e_cap_j"):
        scheduler_config_from_dict({**base, "simulation": {"e_cap_j": 1}})
    with pytest.raises(ValidationError, match="delay_mac"):
        scheduler_config_from_dict({"e_mac": base["e_mac"]})
    (tmp_path / "bad.json").write_text("{\n\n  nope }")
    with pytest.raises(ParseError) as e:
        load_scheduler_config(tmp_path / "bad.json")
    assert e.value.line == 3


def test_energy_threshold_dominates_any_stage():
    rng = np.random.default_rng(0)
    for _ in range(200):
        stages = rng.integers(1, 10**7, 3)
        e = float(rng.uniform(1e-12, 1e-8))
        th = compute_energy_threshold(1.2, e, *stages)
        assert all(th >= e * s for s in stages)
