"""``harvestnet`` command line.

Exit codes: 0 success, 2 parse error, 3 validation error, 4 runtime error.
Every command that takes ``--out DIR`` also writes ``DIR/manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HarvestNetError, ParseError, ValidationError
from .manifest import RunManifest, input_hashes
from .quantizer import BitWidth

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
PTQ_CALIB_SAMPLES = 256


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read: {e.strerror}", path) from None
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None


def _shape(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ParseError(f"bad shape {text!r}; expected e.g. 3,32,32") from None
    if len(dims) != 3:
        raise ParseError(f"bad shape {text!r}; expected three comma-separated ints")
    return dims


def _outdir(args) -> Path | None:
    if getattr(args, "out", None) is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, command, out: Path, inputs, configs=(), outputs=()):
    RunManifest(
        command=command,
        argv=list(args.argv),
        seed=getattr(args, "seed", None),
        output_dir=str(out),
        inputs=input_hashes(inputs),
        config_paths=[str(c) for c in configs if c is not None],
        outputs=sorted(str(o) for o in outputs),
    ).write(out / "manifest.json")


def _load_graph(path):
    from .netgraph import load_graph

    return load_graph(path)


# ---------------------------------------------------------------- count

def cmd_count(args) -> int:
    from .netgraph import count_table

    net = _load_graph(args.graph)
    rows = count_table(net)
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(str(r[c]).rjust(w) for c, w in zip(cols, widths)))
    out = _outdir(args)
    if out:
        with open(out / "count.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
        _manifest(args, "count", out, [args.graph], outputs=["count.csv"])
    return EXIT_OK


# ---------------------------------------------------------------- helpers: graph, dataset, trace

def cmd_graph(args) -> int:
    from .netgraph import build_preset, save_graph

    kw = {}
    if args.width is not None:
        kw["width" if args.preset == "resnet_mini" else "growth"] = args.width
    net = build_preset(args.preset, args.classes, _shape(args.input_shape), **kw)
    save_graph(net, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .trainer import save_dataset, synth_blobs, synth_separable

    shape = _shape(args.input_shape)
    splits = tuple(float(v) for v in args.splits.split(","))
    if args.kind == "separable":
        ds = synth_separable(args.n, shape, seed=args.seed, margin=args.margin, splits=splits)
    else:
        ds = synth_blobs(args.n, shape, args.classes, seed=args.seed, noise=args.noise, splits=splits)
    save_dataset(ds, args.out)
    counts = np.bincount(ds.splits, minlength=3)
    print(f"wrote {args.out}: {len(ds)} samples, {ds.num_classes} classes, train/val/test = "
          f"{counts[0]}/{counts[1]}/{counts[2]}")
    return EXIT_OK


def cmd_trace(args) -> int:
    from .harvestsim import save_trace, synth_trace

    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as e:
        raise ParseError(f"--params: {e.msg}") from None
    tr = synth_trace(args.kind, params, args.duration, args.dt)
    save_trace(tr, args.out)
    print(f"wrote {args.out}: {len(tr)} samples")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    from .container import save_weights
    from .netgraph import quantize_weights
    from .trainer import TrainConfig, accuracy, load_dataset, train, write_log

    cfg_dict = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.precision is not None:
        cfg_dict["bit_width"] = args.precision
    cfg = TrainConfig.from_dict(cfg_dict)
    net = _load_graph(args.graph)
    ds = load_dataset(args.dataset)
    res = train(net, ds, cfg)

    train_x = ds.split("train").inputs
    calib = train_x[:PTQ_CALIB_SAMPLES]
    sets = {BitWidth.FP32: res.weights}
    if res.quantized is not None:
        sets[cfg.bit_width] = res.quantized
    for bw in (BitWidth.Q8, BitWidth.Q4):
        if bw not in sets:
            sets[bw] = quantize_weights(net, res.weights, bw, calib_inputs=calib)
    origin = {bw.name: ("trained" if bw is BitWidth.FP32 or bw is cfg.bit_width else "post-training")
              for bw in sets}

    tr = ds.split("train")
    print(f"{'epoch':>5}  {'loss':>12}  {'accuracy':>8}")
    for row in res.log:
        print(f"{row['epoch']:>5d}  {row['loss']:>12.6e}  {row['accuracy']:>8.4f}")
    for bw in (BitWidth.FP32, BitWidth.Q8, BitWidth.Q4):
        acc = accuracy(net, sets[bw], tr.inputs, tr.labels)
        print(f"{bw.name:>5} train accuracy EE1/EE2/ME = {acc[0]:.4f} {acc[1]:.4f} {acc[2]:.4f}")

    out = _outdir(args)
    if out:
        save_weights(out / "weights.json", [sets[b] for b in (BitWidth.FP32, BitWidth.Q8, BitWidth.Q4)],
                     {"config": cfg.to_dict(), "origin": origin})
        write_log(res, out / "train_log.json")
        _manifest(args, "train", out, [args.graph, args.dataset, args.config], [args.config],
                  ["weights.json", "weights.bin", "train_log.json"])
    return EXIT_OK


# ---------------------------------------------------------------- calibrate

def cmd_calibrate(args) -> int:
    from .container import load_weights
    from .exitpolicy import calibrate_thresholds, save_thresholds
    from .trainer import load_dataset

    net = _load_graph(args.graph)
    sets = load_weights(args.weights)
    ds = load_dataset(args.dataset)
    val = ds.split("val")
    if len(val) == 0:
        raise ValidationError(f"{args.dataset}: no samples tagged val")
    wanted = [BitWidth.parse(args.precision)] if args.precision else [b for b in BitWidth if b in sets]
    reports = []
    for bw in sorted(wanted, reverse=True):
        if bw not in sets:
            raise ValidationError(f"{args.weights}: no {bw.name} weight set")
        sets[bw].validate(net)
        r = calibrate_thresholds(net, sets[bw], val.inputs, val.labels, args.max_drop, bw)
        reports.append(r)
        rates = " ".join(f"{v:.4f}" for v in r.exit_rates)
        print(f"{r.precision:>5}  T=({r.thresholds.t1:.2f}, {r.thresholds.t2:.2f}, {r.thresholds.t3:.2f})"
              f"  rates={rates}  adaptive={r.adaptive_accuracy:.4f}  full={r.full_depth_accuracy:.4f}")
    out = _outdir(args)
    if out:
        save_thresholds(out / "thresholds.json", reports)
        _manifest(args, "calibrate", out, [args.graph, args.weights, args.dataset], outputs=["thresholds.json"])
    return EXIT_OK


# ---------------------------------------------------------------- simulate / report

def _print_summary(report: dict) -> None:
    thr = report["thresholds"]
    s = report["summary"]
    print(f"r_th1={thr['r_th1']:.6e} W  r_th2={thr['r_th2']:.6e} W")
    print("e_th " + "  ".join(f"{k}={v:.6e} J" for k, v in thr["e_th"].items()))
    print(f"inferences={s['inferences']}  " + "  ".join(f"{k}={v}" for k, v in s["starts"].items())
          + f"  depleted={s['depleted']}")
    for k, v in s["exits"].items():
        print(f"  {k:<16} {v:>6d}")


def cmd_simulate(args) -> int:
    from .container import load_weights
    from .eats import load_scheduler_config
    from .exitpolicy import load_thresholds
    from .harvestsim import DEFAULT_DT, SimConfig, export_report, load_trace, report_dict, run_simulation
    from .netgraph import count_macs, stage_macs
    from .plotting import simulation_figure
    from .trainer import load_dataset

    net = _load_graph(args.graph)
    weights = load_weights(args.weights)
    exit_thr = load_thresholds(args.thresholds)
    sched = load_scheduler_config(args.config)
    trace = load_trace(args.trace)
    thr = sched.thresholds(count_macs(net, 3), stage_macs(net))
    sim = sched.simulation
    e_cap = float(sim.get("e_cap", 10 * max(thr.e_th.values())))
    inputs = None
    if args.dataset:
        ds = load_dataset(args.dataset)
        inputs = ds.split("test").inputs if np.any(ds.splits == 2) else ds.inputs
    cfg = SimConfig(
        hardware=sched.profile,
        thresholds=thr,
        network=net,
        weights=weights,
        exit_thresholds=exit_thr,
        dt=float(sim.get("dt", DEFAULT_DT)),
        e_cap=e_cap,
        e_init=float(sim.get("e_init", 0.0)),
        seed=args.seed if args.seed is not None else 0,
        inputs=inputs,
    )
    result = run_simulation(cfg, trace)
    report = report_dict(result)
    _print_summary(report)
    out = _outdir(args)
    if out:
        export_report(result, out / "report.json")
        simulation_figure(report, out / "report.png")
        _manifest(args, "simulate", out,
                  [args.graph, args.weights, args.thresholds, args.config, args.trace, args.dataset],
                  [args.config], ["report.json", "report_series.csv", "report_events.csv", "report.png"])
    return EXIT_OK


def cmd_report(args) -> int:
    from .harvestsim import load_report, write_events_csv, write_series_csv
    from .plotting import simulation_figure

    report = load_report(args.report)
    _print_summary(report)
    out = _outdir(args)
    if out:
        stem = Path(args.report).stem
        write_series_csv(report, out / f"{stem}_series.csv")
        write_events_csv({"events": [e.to_dict() for e in report["events"]]}, out / f"{stem}_events.csv")
        simulation_figure(report, out / f"{stem}.png")
        _manifest(args, "report", out, [args.report],
                  outputs=[f"{stem}_series.csv", f"{stem}_events.csv", f"{stem}.png"])
    return EXIT_OK


# ---------------------------------------------------------------- costs

def cmd_costs(args) -> int:
    from . import costmodel as cm
    from .eats import SchedulerConfig, save_scheduler_config
    from .netgraph import count_macs
    from .plotting import cost_figure

    if args.table:
        rows = cm.load_calibration_table(args.table)
    else:
        rows = cm.reference_rows(args.network)
    # the table rows were measured on --network, so its MAC counts drive the fit;
    # --graph only changes where the fitted costs are evaluated
    if args.network not in cm.REFERENCE_MACS:
        raise ValidationError(f"unknown --network {args.network!r}; choose from {sorted(cm.REFERENCE_MACS)}")
    fit_macs = cm.REFERENCE_MACS[args.network]
    profile = cm.calibrate_profile(rows, fit_macs, cm.PowerModel(args.power_model), args.delay_unit)

    if args.graph:
        net = _load_graph(args.graph)
        macs = {e: count_macs(net, i) for i, e in enumerate(cm.EXITS, start=1)}
        measured = {}
    else:
        macs = fit_macs
        measured = {(r.exit, r.precision): r for r in rows}
    fitted = [cm.stage_cost_for_macs(macs[e], e, bw, profile) for e in cm.EXITS for bw in BitWidth]
    print(f"power model: {profile.power_model.value}")
    print(f"{'precision':>9}  {'packing':>7}  {'delay_mac':>12}  {'e_mac':>12}")
    for bw in BitWidth:
        c = profile[bw]
        print(f"{bw.name:>9}  {c.packing_factor:>7d}  {c.delay_mac:>12.6e}  {c.e_mac:>12.6e}")
    print(f"{'exit':>4}  {'prec':>4}  {'macs':>12}  {'power':>12}  {'delay':>12}  {'pdp':>12}  {'table_pdp':>12}")
    for s in fitted:
        m = measured.get((s.exit, s.precision))
        tp = f"{m.computed_pdp:>12.6e}" if m else f"{'-':>12}"
        print(f"{s.exit:>4}  {s.precision.name:>4}  {s.macs:>12.6e}  {s.power:>12.6e}  {s.delay:>12.6e}"
              f"  {s.pdp:>12.6e}  {tp}")
    reds = cm.table_reductions(rows)
    print(f"{'exit':>4}  {'prec':>4}  {'power_red':>9}  {'delay_red':>9}  {'pdp_red':>9}   (from table rows)")
    for r in reds:
        print(f"{r['exit']:>4}  {r['precision']:>4}  {100 * r['power_reduction']:>8.3f}%"
              f"  {100 * r['delay_reduction']:>8.3f}%  {100 * r['pdp_reduction']:>8.3f}%")

    out = _outdir(args)
    if out:
        with open(out / "costs.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["exit", "precision", "macs", "power", "delay", "pdp", "table_power", "table_delay", "table_pdp"])
            for s in fitted:
                m = measured.get((s.exit, s.precision))
                w.writerow([s.exit, s.precision.name, f"{s.macs:.6e}", f"{s.power:.6e}", f"{s.delay:.6e}",
                            f"{s.pdp:.6e}"] + ([f"{m.power:.6e}", f"{m.delay:.6e}", f"{m.computed_pdp:.6e}"]
                                               if m else ["", "", ""]))
        with open(out / "reductions.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["exit", "precision", "power_reduction", "delay_reduction", "pdp_reduction"])
            for r in reds:
                w.writerow([r["exit"], r["precision"], f"{r['power_reduction']:.6f}",
                            f"{r['delay_reduction']:.6f}", f"{r['pdp_reduction']:.6f}"])
        save_scheduler_config(SchedulerConfig(profile.to_hardware_profile()), out / "scheduler.json")
        cost_figure(fitted, out / "costs.png")
        _manifest(args, "costs", out, [args.table, args.graph],
                  outputs=["costs.csv", "reductions.csv", "scheduler.json", "costs.png"])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harvestnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"harvestnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("count", help="per-exit MACs, parameters and byte sizes")
    c.add_argument("graph")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    c = sub.add_parser("train", help="train (optionally quantization-aware)")
    c.add_argument("graph")
    c.add_argument("dataset")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--precision")
    c.add_argument("--out")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="calibrate early-exit thresholds on the val split")
    c.add_argument("graph")
    c.add_argument("weights")
    c.add_argument("dataset")
    c.add_argument("--max-drop", type=float, required=True)
    c.add_argument("--precision")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("simulate", help="run the energy-harvesting simulation")
    c.add_argument("graph")
    c.add_argument("weights")
    c.add_argument("thresholds")
    c.add_argument("--config", required=True, help="scheduler config")
    c.add_argument("--trace", required=True)
    c.add_argument("--dataset", help="input stream (test split); random inputs otherwise")
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("costs", help="fit the cost model and print stage costs")
    c.add_argument("--table", help="calibration table csv; defaults to the built-in reference rows")
    c.add_argument("--network", default="densenet121", help="network the table rows were measured on (sets the MAC counts for the fit)")
    c.add_argument("--graph", help="evaluate the fitted costs on this graph's MAC counts")
    c.add_argument("--power-model", default="proportional", choices=["average", "proportional"])
    c.add_argument("--delay-unit", type=float, default=1.0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_costs)

    c = sub.add_parser("report", help="re-render a saved simulation report")
    c.add_argument("report")
    c.add_argument("--out")
    c.set_defaults(func=cmd_report)

    c = sub.add_parser("graph", help="write a preset graph file")
    c.add_argument("preset")
    c.add_argument("--classes", type=int, default=10)
    c.add_argument("--input-shape", default="3,32,32")
    c.add_argument("--width", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_graph)

    c = sub.add_parser("dataset", help="write a synthetic dataset container")
    c.add_argument("kind", choices=["separable", "blobs"])
    c.add_argument("--n", type=int, default=400)
    c.add_argument("--input-shape", default="1,8,8")
    c.add_argument("--classes", type=int, default=4)
    c.add_argument("--noise", type=float, default=1.0)
    c.add_argument("--margin", type=float, default=0.25)
    c.add_argument("--splits", default="0.6,0.2,0.2")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_dataset)

    c = sub.add_parser("trace", help="write a synthetic charging trace")
    c.add_argument("kind", choices=["constant", "step", "sinusoid"])
    c.add_argument("--params", help='JSON, e.g. \'{"levels": [1e-3, 5e-3], "times": [0, 5]}\'')
    c.add_argument("--duration", type=float, required=True)
    c.add_argument("--dt", type=float, default=0.01)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (HarvestNetError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
