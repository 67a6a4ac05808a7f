"""Figures for simulation reports and cost tables (file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PRECISION_LEVELS = {"idle": 0, "Q4": 1, "Q8": 2, "FP32": 3}
EXIT_LEVELS = {"EE1": 1, "EE2": 2, "ME": 3}
REASON_STYLE = {"Confidence": ("o", "tab:green"), "Energy": ("x", "tab:red"), "Depleted": ("v", "black")}


def _events(report):
    for e in report["events"]:
        yield e if isinstance(e, dict) else e.to_dict()


def simulation_figure(report: dict, path, dpi: int = 120) -> None:
    """Charging rate, active precision, stored energy and exits over time."""
    s = report["series"]
    t = np.asarray(s["t"])
    thr = report["thresholds"]
    fig, axes = plt.subplots(4, 1, sharex=True, figsize=(8, 8.5))

    ax = axes[0]
    ax.plot(t, s["rate"], lw=1.0, color="tab:orange")
    ax.axhline(thr["r_th1"], ls="--", lw=0.8, color="gray")
    ax.axhline(thr["r_th2"], ls=":", lw=0.8, color="gray")
    ax.set_ylabel("charging rate (W)")

    ax = axes[1]
    ax.step(t, [PRECISION_LEVELS[p] for p in s["precision"]], where="post", lw=1.0)
    ax.set_yticks(list(PRECISION_LEVELS.values()), list(PRECISION_LEVELS))
    ax.set_ylabel("precision")

    ax = axes[2]
    ax.plot(t, s["energy"], lw=1.0, color="tab:blue")
    for name, v in thr["e_th"].items():
        ax.axhline(v, ls="--", lw=0.6, color="gray")
        ax.annotate(f"E_th {name}", (t[0] if t.size else 0, v), fontsize=7, va="bottom", color="gray")
    ax.set_ylabel("stored energy (J)")

    ax = axes[3]
    for reason, (marker, color) in REASON_STYLE.items():
        pts = [(e["time"], EXIT_LEVELS[e["exit"]]) for e in _events(report)
               if (e["kind"] == "ExitTaken" and e.get("reason") == reason)
               or (reason == "Depleted" and e["kind"] == "EnergyDepletedMidSegment")]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, marker=marker, color=color, s=18, label=reason)
    ax.set_yticks(list(EXIT_LEVELS.values()), list(EXIT_LEVELS))
    ax.set_ylim(0.5, 3.5)
    ax.set_ylabel("exit")
    ax.set_xlabel("time (s)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper right", fontsize=7, frameon=False)

    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def cost_figure(stage_costs, path, dpi: int = 120) -> None:
    """Grouped bars of power, delay and pdp per exit, one bar per precision (log scale)."""
    exits = ["EE1", "EE2", "ME"]
    precisions = ["FP32", "Q8", "Q4"]
    by = {(c.exit, c.precision.name): c for c in stage_costs}
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    width = 0.25
    x = np.arange(len(exits))
    for ax, attr in zip(axes, ("power", "delay", "pdp")):
        for j, p in enumerate(precisions):
            vals = [getattr(by[(e, p)], attr) if (e, p) in by else np.nan for e in exits]
            ax.bar(x + (j - 1) * width, vals, width, label=p)
        ax.set_xticks(x, exits)
        ax.set_yscale("log")
        ax.set_title(attr)
    axes[0].legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
