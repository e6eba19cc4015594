"""Command-line interface.

Subcommands: `run <spec>` executes a full experiment, `diagnose <spec>`
emits only the diagnostic curves and ratios, `compare <dir> <dir>` takes
ratios of matching mean curves from two finished runs, `schedule-dump`
prints a noise schedule as CSV, and `selftest` runs the deterministic
oracle battery (nonzero exit on any failure).
"""

import argparse
import sys
from pathlib import Path

from .diagnostics import read_curve_csv
from .harness import (curve_ratio, load_experiment, run_experiment,
                      write_ratio_csv)
from .schedule import dump_csv, make_linear_schedule
from .selftest import selftest_text


def _cmd_run(args, curves_only=False):
    spec = load_experiment(args.spec)
    result = run_experiment(spec, out_dir=args.out, curves_only=curves_only)
    for row in result["summary"]:
        print(f"{row['method']:<16} psnr {row['psnr_mean']:.3f} "
              f"ssim {row['ssim_mean']:.4f} mse {row['mse_mean']:.4g} "
              f"failures {row['failures']}/{row['runs']}")
    print(f"wrote {result['out_dir']}")
    return 0


def _cmd_diagnose(args):
    return _cmd_run(args, curves_only=True)


def _cmd_compare(args):
    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    out = Path(args.out)
    labels_a = {p.stem: p for p in sorted((dir_a / "curves").glob("*.csv"))}
    labels_b = {p.stem: p for p in sorted((dir_b / "curves").glob("*.csv"))}
    common = sorted(set(labels_a) & set(labels_b))
    if not common:
        print("error: no matching curve labels between the two runs",
              file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    for label in common:
        _, mat_a = read_curve_csv(labels_a[label])
        _, mat_b = read_curve_csv(labels_b[label])
        t, ratio, flags = curve_ratio(mat_a[:, 0], mat_a[:, 1:],
                                      mat_b[:, 0], mat_b[:, 1:])
        path = out / f"{label}_a_over_b.csv"
        write_ratio_csv(path, t, ratio, flags)
        print(f"wrote {path}")
    return 0


def _cmd_schedule_dump(args):
    sched = make_linear_schedule(args.T, beta_start=args.beta_start,
                                 beta_end=args.beta_end,
                                 sigma_mode=args.sigma_mode)
    if args.out:
        with open(args.out, "w") as fh:
            dump_csv(sched, fh)
        print(f"wrote {args.out}")
    else:
        dump_csv(sched, sys.stdout)
    return 0


def _cmd_selftest(args):
    text, ok = selftest_text()
    sys.stdout.write(text)
    return 0 if ok else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dpslab",
        description="Guided-diffusion restoration laboratory with exact "
                    "mixture score models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every cell of an experiment config")
    p_run.add_argument("spec", help="path to the experiment config")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides the config)")
    p_run.set_defaults(func=_cmd_run)

    p_diag = sub.add_parser("diagnose",
                            help="run a config but emit only curves and ratios")
    p_diag.add_argument("spec")
    p_diag.add_argument("--out", default=None)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_cmp = sub.add_parser("compare",
                           help="ratio matching mean curves of two run dirs")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--out", default="compare_out")
    p_cmp.set_defaults(func=_cmd_compare)

    p_sd = sub.add_parser("schedule-dump", help="print a schedule as CSV")
    p_sd.add_argument("--T", type=int, default=1000)
    p_sd.add_argument("--beta-start", type=float, default=1e-4)
    p_sd.add_argument("--beta-end", type=float, default=0.02)
    p_sd.add_argument("--sigma-mode", choices=("beta", "posterior"),
                      default="beta")
    p_sd.add_argument("--out", default=None)
    p_sd.set_defaults(func=_cmd_schedule_dump)

    p_st = sub.add_parser("selftest", help="run the oracle battery")
    p_st.set_defaults(func=_cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
