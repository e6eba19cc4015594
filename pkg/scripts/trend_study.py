"""Deblur trend study: frequency attention and paired eps-error windows.

Runs the configured deblur comparison, then reports the three trend
readouts the curve files encode: the guidance-signal band ratio at the
ends of sampling, the windowed eps-error ratio of every method against
the baseline (first method section), and mean final reconstruction MSE.

Usage:
    python3 scripts/trend_study.py [--config configs/deblur_trend.cfg]
                                   [--out DIR] [--plot]
"""

import argparse
from pathlib import Path

import numpy as np

from dpslab.diagnostics import STEP_COLUMNS
from dpslab.harness import compare_curves, load_experiment, mean_curve, run_experiment

COL = {name: j for j, name in enumerate(STEP_COLUMNS[1:])}


def windowed_means(t_grid, values, T):
    early = values[t_grid >= 0.6 * T]
    late = values[(t_grid >= 1) & (t_grid <= 0.3 * T)]
    return float(np.nanmean(early)), float(np.nanmean(late))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/deblur_trend.cfg")
    ap.add_argument("--out", default=None, help="override the config out_dir")
    ap.add_argument("--plot", action="store_true",
                    help="write curve plots (needs matplotlib)")
    args = ap.parse_args()

    spec = load_experiment(args.config)
    result = run_experiment(spec, out_dir=args.out)
    records = result["records"]
    out = result["out_dir"]
    labels = [m.label for m in spec.methods]
    base = labels[0]

    # ----- guidance-signal frequency attention -----
    print(f"wrote {out}")
    print("\nguidance band ratio (high/low), start vs end of sampling:")
    for label in labels:
        t_grid, mat = mean_curve(records[label])
        curve = mat[:, COL["freq_ratio_guidance"]]
        top = curve[t_grid == spec.T - 1]
        bottom = curve[t_grid == 1]
        print(f"  {label:12s} t={spec.T - 1}: {float(top[0]):8.4f}   "
              f"t=1: {float(bottom[0]):8.4f}")

    # ----- paired eps-error windows vs the baseline -----
    print(f"\neps-error ratio vs {base} "
          f"(early = t in [{int(0.6 * spec.T)}, {spec.T}], "
          f"late = t in [1, {int(0.3 * spec.T)}]):")
    for label in labels[1:]:
        t_grid, ratio, _ = compare_curves(records[label], records[base])
        early, late = windowed_means(t_grid, ratio[:, COL["eps_error"]], spec.T)
        print(f"  {label:12s} early {early:6.3f}   late {late:6.3f}")

    # ----- final reconstruction error -----
    print("\nmean final MSE / PSNR over successful runs:")
    for row in result["summary"]:
        print(f"  {row['method']:12s} mse {row['mse_mean']:.5f}   "
              f"psnr {row['psnr_mean']:6.3f}   failures {row['failures']}")

    if args.plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("\nmatplotlib not installed; skipping plots")
            return
        fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
        for label in labels:
            t_grid, mat = mean_curve(records[label])
            axes[0].plot(t_grid, mat[:, COL["freq_ratio_guidance"]], label=label)
            axes[1].plot(t_grid, mat[:, COL["eps_error"]], label=label)
            axes[2].plot(t_grid, mat[:, COL["recon_mse"]], label=label)
        for ax, title in zip(axes, ("guidance band ratio", "eps-error",
                                    "reconstruction MSE")):
            ax.set_xlabel("t")
            ax.set_title(title)
            ax.invert_xaxis()
            ax.legend()
        axes[1].set_yscale("log")
        fig.tight_layout()
        fig.savefig(Path(out) / "trend_curves.png", dpi=150)
        print(f"\nwrote {Path(out) / 'trend_curves.png'}")


if __name__ == "__main__":
    main()
