"""Acceptance criteria 1-12, one test each.

Every test registers a PASS/FAIL line (with the measured numbers) that is
printed in the terminal summary, and also prints it to stdout.
"""
import math
import time

import numpy as np
import pytest

from harvestnet import costmodel as cm
from harvestnet.eats import (
    HardwareProfile,
    SchedulerThresholds,
    compute_energy_threshold,
    derive_thresholds,
    select_precision,
)
from harvestnet.exitpolicy import THRESHOLD_GRID, ExitThresholds, calibrate_from_outputs, exit_outputs, route
from harvestnet.harvestsim import EventKind, SimConfig, run_simulation, synth_trace, export_report
from harvestnet.netgraph import (
    SegmentRunner,
    build_preset,
    count_macs,
    forward_all_exits,
    init_weights,
    stage_macs,
)
from harvestnet.quantizer import (
    BitWidth,
    ObserverMode,
    QuantParams,
    calibrate_tensor,
    dequantize,
    affine_quantize,
    fake_quantize,
    reconstruction_mse,
)
from harvestnet.trainer import TrainConfig, accuracy, grad_check, loss_from_logits, synth_separable, train
from conftest import ACCEPTANCE_LINES, random_network, random_weights, weight_sets
from oracles import ScalarForward, exhaustive_calibration, macs_by_loop


def verdict(n, title, checks):
    """``checks`` maps a short label to (ok, measured text)."""
    ok = all(c[0] for c in checks.values())
    detail = "; ".join(f"{k}: {v[1]}" for k, v in checks.items())
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title} ({detail})"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


HW = HardwareProfile({"FP32": 1e-9, "Q8": 2e-10, "Q4": 1e-10}, {"FP32": 1e-8, "Q8": 1.7e-9, "Q4": 8.5e-10}, f_max=10.0)


@pytest.fixture(scope="module")
def sim_net():
    net = build_preset("resnet_mini", 3, (1, 8, 8), width=2)
    rng = np.random.default_rng(21)
    fp = random_weights(net, rng)
    return net, weight_sets(net, fp, rng.standard_normal((16, 1, 8, 8)))


def sim_config(net, weights, **kw):
    thr = derive_thresholds(HW, count_macs(net, 3), stage_macs(net))
    args = dict(hardware=HW, thresholds=thr, network=net, weights=weights,
                exit_thresholds=ExitThresholds(0.6, 0.6), dt=1e-3,
                e_cap=10 * thr.e_th[BitWidth.FP32], e_init=0.0, seed=0)
    args.update(kw)
    return SimConfig(**args)


def latching_ok(events):
    open_start = None
    for ev in events:
        if ev.kind is EventKind.START_INFERENCE:
            if open_start is not None:
                return False
            open_start = ev
        elif ev.kind in (EventKind.EXIT_TAKEN, EventKind.ENERGY_DEPLETED):
            if open_start is None or ev.precision != open_start.precision:
                return False
            open_start = None
    return True


def pairing_ok(events):
    starts = [e.inference for e in events if e.kind is EventKind.START_INFERENCE]
    ends = [e.inference for e in events if e.kind in (EventKind.EXIT_TAKEN, EventKind.ENERGY_DEPLETED)]
    # the last inference may still be running when the trace ends
    return ends == starts or ends == starts[:-1]


def scenario_traces(cfg):
    lo, hi = cfg.thresholds.r_th1, cfg.thresholds.r_th2
    step = synth_trace("step", {"levels": [0.5 * lo, 0.5 * (lo + hi), 2 * hi], "times": [0, 0.3, 0.6]}, 0.9, 0.01)
    sine = synth_trace("sinusoid", {"offset": hi, "amplitude": hi, "period": 0.5, "phase": -math.pi / 2}, 1.0, 0.005)
    crash = synth_trace("step", {"levels": [2 * hi, 0.5e-3 * lo], "times": [0, 0.02]}, 0.6, 0.01)
    return {"step": step, "sinusoid": sine, "crash": crash}


# ---------------------------------------------------------------- 1-5: table-derived


def test_criterion_01_pdp_identity():
    rows = cm.reference_rows("resnet18") + cm.reference_rows("densenet121")
    worst = max(cm.pdp_relative_error(r) for r in rows)
    verdict(1, "PDP identity on the 18 measured rows", {
        "rows": (len(rows) == 18, str(len(rows))),
        "max rel err": (worst <= 0.015, f"{worst:.4%} <= 1.5%"),
    })


def test_criterion_02_power_reduction():
    red = {(r["exit"], r["precision"]): r for r in cm.table_reductions(cm.reference_rows("densenet121"))}
    v = 100 * red[("ME", "Q4")]["power_reduction"]
    verdict(2, "DenseNet ME FP32->Q4 power reduction", {"reduction": (abs(v - 87.5) <= 0.2, f"{v:.3f}% vs 87.5 +- 0.2")})


def test_criterion_03_pdp_improvement():
    checks = {}
    for net, fp, q4 in (("densenet121", 13.6, 0.141), ("resnet18", 10.3, 0.106)):
        rows = {(r.exit, r.precision): r for r in cm.reference_rows(net)}
        a, b = rows[("ME", BitWidth.FP32)], rows[("ME", BitWidth.Q4)]
        # published pdp column, and the product recomputed from power and delay
        ok = (a.pdp == fp and b.pdp == q4
              and math.isclose(a.computed_pdp, fp, rel_tol=0.015) and math.isclose(b.computed_pdp, q4, rel_tol=0.015))
        checks[net] = (ok, f"{a.computed_pdp:.4g} -> {b.computed_pdp:.4g} J (listed {a.pdp} -> {b.pdp})")
    verdict(3, "ME PDP FP32 -> Q4", checks)


def test_criterion_04_packing_factor():
    rows = cm.reference_rows("resnet18")
    r4 = cm.delay_ratio(rows, "ME", "FP32", "Q4")
    r8 = cm.delay_ratio(rows, "ME", "FP32", "Q8")
    verdict(4, "packing factor from ResNet ME delays", {
        "FP32/Q4": (abs(r4 / 12 - 1) <= 0.01, f"{r4:.3f} vs 12 +- 1%"),
        "FP32/Q8": (abs(r8 / 6 - 1) <= 0.01, f"{r8:.3f} vs 6 +- 1%"),
    })


def test_criterion_05_energy_threshold():
    cum = (4.02e7, 7.37e7, 1.41e8)
    seg = (cum[0], cum[1] - cum[0], cum[2] - cum[1])
    e = compute_energy_threshold(1.0, 1e-9, *seg)
    # hand arithmetic: the largest segment is the third, 6.73e7 MACs at 1 nJ each
    verdict(5, "energy threshold from differenced cumulative MACs", {
        "segments": (all(math.isclose(a, b, rel_tol=1e-12) for a, b in zip(seg, (4.02e7, 3.35e7, 6.73e7))),
                     ", ".join(f"{s:.4g}" for s in seg)),
        "e_th": (math.isclose(e, 6.73e-2, rel_tol=1e-12), f"{e!r} J vs 6.73e-2"),
    })


# ---------------------------------------------------------------- 6-12: property suites


def test_criterion_06_quantization():
    rng = np.random.default_rng(6)
    checks = {}
    for bw in (BitWidth.Q8, BitWidth.Q4):
        p = QuantParams(float(rng.uniform(0.01, 1.0)), float(rng.uniform(-1, 1)), bw)
        lo, hi = p.qmin * p.scale + p.zero_point, p.qmax * p.scale + p.zero_point
        x = rng.uniform(lo, hi, 100_000)
        err = float(np.max(np.abs(dequantize(affine_quantize(x, p)) - x)))
        q = affine_quantize(np.array([lo - 10 * p.scale, lo, hi, hi + 10 * p.scale]), p)
        sat = list(q.codes) == [bw.qmin, bw.qmin, bw.qmax, bw.qmax]
        fq = fake_quantize(x, p)
        idem = np.array_equal(fake_quantize(fq, p), fq)
        checks[bw.name] = (err <= p.scale / 2 and sat and idem,
                           f"max err {err / p.scale:.4f} step, saturation {sat}, idempotent {idem}")
    worse = 0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(20, 400))) * rng.uniform(0.1, 5) + rng.uniform(-2, 2)
        for bw in (BitWidth.Q8, BitWidth.Q4):
            mm = reconstruction_mse(x, calibrate_tensor(x, bw, ObserverMode.MIN_MAX))
            ms = reconstruction_mse(x, calibrate_tensor(x, bw, ObserverMode.MSE_SEARCH))
            worse += ms > mm
    checks["MseSearch <= MinMax"] = (worse == 0, f"{worse} of 200 worse")
    verdict(6, "quantization suite", checks)


def test_criterion_07_engine_oracle():
    fp_err, code_bad, out_err = 0.0, 0, 0.0
    for seed in range(200):
        rng = np.random.default_rng(7000 + seed)
        net = random_network(rng)
        fp = random_weights(net, rng)
        sets = weight_sets(net, fp, rng.standard_normal((8, *net.input_shape)))
        x = rng.standard_normal(net.input_shape)
        for a, b in zip(ScalarForward(net, fp, False).run(x), forward_all_exits(net, fp, x, BitWidth.FP32)):
            fp_err = max(fp_err, float(np.max(np.abs(np.asarray(a) - b))))
        for bw in (BitWidth.Q8, BitWidth.Q4):
            sf = ScalarForward(net, sets[bw], True)
            ref = sf.run(x)
            rec = {}
            r = SegmentRunner(net, sets[bw], x, bw, record=rec)
            got = [r.advance() for _ in range(3)]
            for name, d in sf.record.items():
                same = (np.array_equal(np.array(d["codes"]), rec[name]["codes"][0])
                        and np.array_equal(np.array(d["acc"]).reshape(-1), rec[name]["acc"].reshape(-1)))
                code_bad += not same
            for a, b in zip(ref, got):
                out_err = max(out_err, float(np.max(np.abs(np.asarray(a) - np.asarray(b).reshape(-1)))))
    verdict(7, "engine vs scalar oracle on 200 random networks", {
        "FP32 max abs diff": (fp_err <= 1e-6, f"{fp_err:.2e} <= 1e-6"),
        "Q8/Q4 codes+accumulators": (code_bad == 0, f"{code_bad} mismatching layers"),
        "Q8/Q4 outputs": (out_err <= 1e-9, f"{out_err:.2e}"),
    })


def test_criterion_08_mac_counter():
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(8000 + seed)
        net = random_network(rng)
        loop = macs_by_loop(net, init_weights(net, seed), rng.standard_normal(net.input_shape))
        bad += any(net.layer_macs(l) != loop[l.name] for l in net.layers())
        seg = [sum(loop[l.name] for l in s) for s in net.segments]
        head = [sum(loop[l.name] for l in h) for h in net.heads]
        bad += any(count_macs(net, e) != sum(seg[:e]) + head[e - 1] for e in (1, 2, 3))
    verdict(8, "MAC counter vs loop counting on 100 random graphs", {"mismatches": (bad == 0, str(bad))})


def test_criterion_09_scheduler(sim_net):
    rng = np.random.default_rng(9)
    e_th = {"Q4": 1.0, "Q8": 2.0, "FP32": 3.0}
    nonmono = 0
    for _ in range(10_000):
        r1 = float(rng.uniform(1e-6, 1.0))
        t = SchedulerThresholds(r1, r1 * float(rng.uniform(1.0001, 100)), e_th)
        a, b = np.sort(rng.uniform(0, 3 * t.r_th2, 2))
        nonmono += select_precision(float(a), t) > select_precision(float(b), t)
    t = SchedulerThresholds(0.25, 0.75, e_th)
    bounds = (select_precision(0.25, t) is BitWidth.Q8 and select_precision(0.75, t) is BitWidth.FP32
              and select_precision(math.nextafter(0.25, 0), t) is BitWidth.Q4
              and select_precision(math.nextafter(0.75, 0), t) is BitWidth.Q8)
    net, ws = sim_net
    cfg = sim_config(net, ws)
    latched = [latching_ok(run_simulation(cfg, tr).events) for tr in scenario_traces(cfg).values()]
    verdict(9, "scheduler suite", {
        "monotone": (nonmono == 0, f"{nonmono} violations in 10^4"),
        "boundaries": (bounds, "r_th1 -> Q8, r_th2 -> FP32"),
        "latching": (all(latched), f"{sum(latched)}/{len(latched)} runs"),
    })


def test_criterion_10_simulation(sim_net, tmp_path):
    net, ws = sim_net
    cfg = sim_config(net, ws)
    traces = scenario_traces(cfg)
    checks = {}
    runs = {}
    for name, tr in traces.items():
        c = cfg
        if name == "crash":
            cap = 20 * cfg.thresholds.e_th[BitWidth.FP32]
            c = sim_config(net, ws, e_cap=cap, e_init=cap, exit_thresholds=ExitThresholds(1.0, 1.0))
        res = run_simulation(c, tr)
        runs[name] = (c, res)
    bounds = all(np.all(r.energy >= 0) and np.all(r.energy <= c.e_cap) for c, r in runs.values())
    checks["bounds"] = (bounds, "0 <= e_sys <= e_cap")
    paired = all(pairing_ok(r.events) for _, r in runs.values())
    checks["pairing"] = (paired, "one terminal event per start")
    export_report(run_simulation(cfg, traces["step"]), tmp_path / "a.json")
    export_report(run_simulation(cfg, traces["step"]), tmp_path / "b.json")
    same = all((tmp_path / f"a{s}").read_bytes() == (tmp_path / f"b{s}").read_bytes()
               for s in (".json", "_series.csv", "_events.csv"))
    checks["determinism"] = (same, "byte-identical reports")
    prec = [p for p in runs["step"][1].precision if p != "idle"]
    order = [p for i, p in enumerate(prec) if i == 0 or p != prec[i - 1]]
    checks["step order"] = (order == ["Q4", "Q8", "FP32"], "->".join(order))
    crash_exits = [(e.exit, e.reason) for e in runs["crash"][1].events if e.kind is EventKind.EXIT_TAKEN]
    n_energy = crash_exits.count(("EE1", "Energy"))
    checks["charge crash"] = (n_energy >= 1, f"{n_energy} EE1/Energy exits, first exit {crash_exits[0]}")
    verdict(10, "simulation suite", checks)


def test_criterion_11_trainer():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    net_g = build_preset("resnet_mini", 4, (2, 8, 8), width=2)
    ws = random_weights(net_g, rng, 0.3)
    gc = grad_check(net_g, ws, (rng.standard_normal((3, 2, 8, 8)), rng.integers(0, 4, 3)), samples_per_tensor=8)

    net = build_preset("resnet_mini", 2, (1, 8, 8), width=4)
    ds = synth_separable(200, (1, 8, 8), seed=0)
    cfg = dict(epochs=8, learning_rate=0.1, batch_size=16, seed=0)
    fp = train(net, ds, TrainConfig(**cfg))
    q8 = train(net, ds, TrainConfig(bit_width="Q8", **cfg))
    acc_fp = accuracy(net, fp.weights, ds.inputs, ds.labels)[2]
    acc_q8 = accuracy(net, q8.deployable(), ds.inputs, ds.labels)[2]

    ce_err = 0.0
    for k in (2, 3, 10, 100):
        loss, _ = loss_from_logits([np.zeros((7, k))] * 3, np.arange(7) % k, (1.0, 0.0, 0.0))
        ce_err = max(ce_err, abs(loss - math.log(k)))
    elapsed = time.perf_counter() - t0
    verdict(11, "trainer suite", {
        "grad_check": (gc < 1e-4, f"{gc:.2e} < 1e-4"),
        "FP32 accuracy": (acc_fp >= 0.95, f"{acc_fp:.3f} >= 0.95"),
        "Q8 accuracy": (acc_q8 >= acc_fp - 0.05, f"{acc_q8:.3f}"),
        "uniform CE": (ce_err < 1e-9, f"|CE - ln K| = {ce_err:.1e}"),
        "runtime": (elapsed < 60, f"{elapsed:.1f} s < 60 s"),
    })


def test_criterion_12_exit_policy(sim_net):
    net, ws = sim_net
    rng = np.random.default_rng(12)
    xs = rng.standard_normal((200, *net.input_shape))
    conf, pred = exit_outputs(net, ws[BitWidth.FP32], xs, BitWidth.FP32)
    labels = pred[:, 2].copy()
    flip = rng.random(200) < 0.3
    labels[flip] = rng.integers(0, net.num_classes, int(flip.sum()))

    subset = True
    prev1 = prev2 = None
    for t in THRESHOLD_GRID:
        ee1 = set(np.flatnonzero(route(conf, (t, 1.0)) == 1))
        ee2 = set(np.flatnonzero(route(conf, (1.0, t)) == 2))
        if prev1 is not None:
            subset &= ee1 <= prev1 and ee2 <= prev2
        prev1, prev2 = ee1, ee2
    sums, oracle = [], True
    for drop in (0.0, 0.01, 0.05, 0.1, 0.3, 1.0):
        r = calibrate_from_outputs(conf, pred, labels, drop)
        sums.append(abs(sum(r.exit_rates) - 1.0))
        oracle &= (r.thresholds.t1, r.thresholds.t2) == exhaustive_calibration(conf, pred, labels, drop, THRESHOLD_GRID)
    verdict(12, "exit-policy suite", {
        "subset property": (bool(subset), "21-point grid, 200 samples"),
        "rates sum to 1": (max(sums) < 1e-12, f"max |sum-1| = {max(sums):.1e}"),
        "exhaustive oracle": (bool(oracle), "6 accuracy budgets"),
    })
