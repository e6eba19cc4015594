"""Crafted-target mixing sweep on box inpainting.

Runs every method section of the config (intended: one dpscm section per
mu value) and prints final PSNR against mu, the shape the ablation is
about: mixing in the crafted target should not fall below the mu=0
(plain guidance) row.

Usage:
    python3 scripts/mu_sweep.py [--config configs/box_inpaint_mu.cfg]
                                [--out DIR] [--plot]
"""

import argparse
from pathlib import Path

from dpslab.harness import load_experiment, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/box_inpaint_mu.cfg")
    ap.add_argument("--out", default=None)
    ap.add_argument("--plot", action="store_true")
    args = ap.parse_args()

    spec = load_experiment(args.config)
    result = run_experiment(spec, out_dir=args.out)
    print(f"wrote {result['out_dir']}")

    mus = [m.mu for m in spec.methods]
    rows = result["summary"]
    print("\n   mu     psnr      mse      failures")
    for mu, row in zip(mus, rows):
        print(f"  {mu:4.2f}  {row['psnr_mean']:7.3f}  {row['mse_mean']:.5f}  "
              f"{row['failures']:4d}")

    base = rows[0]["psnr_mean"]
    verdict = all(row["psnr_mean"] >= base for row in rows[1:])
    print(f"\nno mu below the mu={mus[0]} baseline: {verdict}")

    if args.plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("matplotlib not installed; skipping plot")
            return
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(mus, [row["psnr_mean"] for row in rows], marker="o")
        ax.set_xlabel("mu")
        ax.set_ylabel("mean final PSNR (dB)")
        fig.tight_layout()
        fig.savefig(Path(result["out_dir"]) / "mu_sweep.png", dpi=150)
        print(f"wrote {Path(result['out_dir']) / 'mu_sweep.png'}")


if __name__ == "__main__":
    main()
