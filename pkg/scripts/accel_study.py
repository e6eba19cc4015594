"""Accelerated crafting study: freeze the crafted chain below a cutoff.

Runs the configured pair (full crafted sampling and the accel_cutoff
variant), then reports the relative movement of the final metrics and
the crafted-chain score-evaluation savings.

Usage:
    python3 scripts/accel_study.py [--config configs/accel_inpaint.cfg]
                                   [--out DIR]
"""

import argparse

from dpslab.harness import load_experiment, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/accel_inpaint.cfg")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    spec = load_experiment(args.config)
    result = run_experiment(spec, out_dir=args.out)
    print(f"wrote {result['out_dir']}")

    print("\n  label    psnr      mse      craft evals/run")
    for row in result["summary"]:
        print(f"  {row['method']:8s}{row['psnr_mean']:7.3f}  "
              f"{row['mse_mean']:.5f}  {row['nfe_y_mean']:10.0f}")

    rows = {row["method"]: row for row in result["summary"]}
    labels = [m.label for m in spec.methods]
    full, accel = rows[labels[0]], rows[labels[1]]
    rel_mse = abs(accel["mse_mean"] - full["mse_mean"]) / full["mse_mean"]
    rel_psnr = abs(accel["psnr_mean"] - full["psnr_mean"]) / full["psnr_mean"]
    saved = 1.0 - accel["nfe_y_mean"] / full["nfe_y_mean"]
    print(f"\nfinal-metric movement: mse {rel_mse:.1%}, psnr {rel_psnr:.1%}")
    print(f"crafted-chain evaluations saved: {saved:.1%}")


if __name__ == "__main__":
    main()
