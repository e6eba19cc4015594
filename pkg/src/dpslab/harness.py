"""Experiment harness: config parsing, corpus generation, batch execution.

A text config describes one task (operator, noise, prior, image count,
seeds) and any number of method sections.  The harness runs every
(image, seed, method) cell with paired RNG streams, records per-run
diagnostics, and emits CSV curves, ratio curves against the first
(baseline) method, PNG snapshots, and a plain-text report.  Everything
except the report's timestamp header is byte-reproducible.
"""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .craft import make_measurement_model
from .diagnostics import STEP_COLUMNS, RunRecord, _fmt, write_record_csv
from .operators import (GaussianBlur, GaussianNoise, PoissonNoise, degrade,
                        make_operator)
from .pngio import write_png_gray
from .samplers import (CRAFT_METHODS, SamplerConfig, SamplerDivergence,
                       make_streams, measurement_rng, run)
from .schedule import make_linear_schedule
from .score import (EmpiricalPrior, GmmPrior, ScoreModel,
                    load_empirical_png_dir)

# sampler streams hang off 100003 * image_index + seed, so distinct cells
# never share a stream as long as seeds stay below 100003
_CELL_STRIDE = 100003


def cell_seed(image_index, seed):
    return _CELL_STRIDE * image_index + seed


# ---------------- experiment specification ----------------

_GLOBAL_INT = {"size", "images", "prior_images", "prior_components", "T",
               "diag_stride", "mask_seed", "prior_seed", "test_seed"}
_GLOBAL_FLOAT = {"noise_sigma", "noise_lam", "beta_start", "beta_end",
                 "gmm_variance"}
_GLOBAL_STR = {"operator", "noise", "prior", "prior_path", "craft_mode",
               "sigma_mode", "out_dir"}
_METHOD_FLOAT = {"zeta", "omega", "mu", "proposal_width", "poisson_floor",
                 "accel_cutoff"}
_METHOD_INT = {"mc_samples"}
_METHOD_STR = {"guidance_norm"}


@dataclass
class ExperimentSpec:
    """One task plus the methods to run on it."""

    size: int = 32
    operator: str = "gaussian_blur"
    op_params: dict = field(default_factory=dict)
    noise: str = "gaussian"
    noise_sigma: float = 0.05
    noise_lam: float = 1.0
    prior: str = "empirical"
    prior_images: int = 64
    prior_components: int = 8
    gmm_variance: float = 0.01
    prior_path: str = ""
    images: int = 10
    seeds: tuple = (0, 1, 2, 3, 4)
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"
    craft_mode: str = "auto"
    diag_stride: int = 10
    mask_seed: int = 7
    prior_seed: int = 101
    test_seed: int = 202
    out_dir: str = "out"
    methods: list = field(default_factory=list)

    def __post_init__(self):
        if not self.methods:
            raise ValueError("spec needs at least one method section")
        if not self.seeds:
            raise ValueError("spec needs at least one seed")
        if self.size < 4:
            raise ValueError(f"size must be >= 4, got {self.size}")
        if self.images < 1:
            raise ValueError("images must be >= 1")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate method labels: {labels}")
        if self.noise not in ("gaussian", "poisson"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if self.prior not in ("empirical", "gmm", "png_dir"):
            raise ValueError(f"unknown prior source {self.prior!r}")
        if self.prior == "png_dir" and not self.prior_path:
            raise ValueError("prior=png_dir needs prior_path")


def _coerce(value):
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def parse_experiment(text):
    """Parse the flat key=value config format into an ExperimentSpec.

    Lines are `key = value`; `#` starts a comment; `[method KIND]` or
    `[method KIND LABEL]` opens a method section whose keys feed that
    method's SamplerConfig.  A fractional accel_cutoff in (0, 1) is
    interpreted as a fraction of T.
    """
    globals_ = {}
    op_params = {}
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ValueError(f"line {lineno}: unterminated section header")
            tokens = line[1:-1].split()
            if not tokens or tokens[0] != "method" or len(tokens) not in (2, 3):
                raise ValueError(f"line {lineno}: expected [method KIND] or "
                                 f"[method KIND LABEL]")
            current = {"method": tokens[1],
                       "label": tokens[2] if len(tokens) == 3 else tokens[1]}
            sections.append(current)
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if current is not None:
            if key in _METHOD_FLOAT:
                current[key] = float(value)
            elif key in _METHOD_INT:
                current[key] = int(value)
            elif key in _METHOD_STR:
                current[key] = value
            else:
                raise ValueError(f"line {lineno}: unknown method key {key!r}")
        elif key == "seeds":
            globals_["seeds"] = tuple(
                int(s) for s in value.replace(",", " ").split())
        elif key.startswith("op."):
            op_params[key[3:]] = _coerce(value)
        elif key in _GLOBAL_INT:
            globals_[key] = int(value)
        elif key in _GLOBAL_FLOAT:
            globals_[key] = float(value)
        elif key in _GLOBAL_STR:
            globals_[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")

    T = globals_.get("T", ExperimentSpec.T)
    methods = []
    for sec in sections:
        sec = dict(sec, T=T)
        cutoff = sec.get("accel_cutoff", 0.0)
        if 0.0 < cutoff < 1.0:
            cutoff = round(cutoff * T)
        sec["accel_cutoff"] = int(cutoff)
        methods.append(SamplerConfig(**sec))
    return ExperimentSpec(op_params=op_params, methods=methods, **globals_)


def load_experiment(path):
    return parse_experiment(Path(path).read_text())


# ---------------- deterministic image corpus ----------------

def make_corpus(count, size, seed):
    """Deterministic grayscale images in [0, 1]: smoothed random fields
    with a few geometric shapes (rectangles, disks, stripes) overlaid.

    The same (count, size, seed) always yields the same array, so priors
    and test sets are reproducible without bundling binary data.
    """
    rng = np.random.default_rng(seed)
    ksize = 2 * max(1, size // 8) + 1
    blur = GaussianBlur((size, size), ksize, max(1.0, size / 10.0))
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((count, size, size))
    for i in range(count):
        field = blur.apply(rng.random((size, size)))
        lo, hi = field.min(), field.max()
        img = (field - lo) / (hi - lo) if hi > lo else np.full_like(field, 0.5)
        for _ in range(2 + int(rng.integers(3))):
            shade = 0.1 + 0.8 * rng.random()
            kind = int(rng.integers(3))
            if kind == 0:
                h = int(rng.integers(size // 8, size // 2))
                w = int(rng.integers(size // 8, size // 2))
                r = int(rng.integers(0, size - h))
                c = int(rng.integers(0, size - w))
                img[r:r + h, c:c + w] = shade
            elif kind == 1:
                cy, cx = rng.integers(0, size, size=2)
                rad = int(rng.integers(size // 8, size // 3))
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = shade
            else:
                period = int(rng.integers(3, max(4, size // 4)))
                phase = int(rng.integers(period))
                img[:, (xx[0] + phase) % period == 0] = shade
        out[i] = np.clip(img, 0.0, 1.0)
    return out


# ---------------- building blocks from a spec ----------------

def build_noise(spec):
    if spec.noise == "poisson":
        return PoissonNoise(spec.noise_lam)
    return GaussianNoise(spec.noise_sigma)


def build_operator(spec):
    return make_operator(spec.operator, dict(spec.op_params),
                         (spec.size, spec.size),
                         rng=np.random.default_rng(spec.mask_seed))


def build_prior_model(spec, schedule):
    if spec.prior == "png_dir":
        prior = load_empirical_png_dir(spec.prior_path)
        if prior.shape != (spec.size, spec.size):
            raise ValueError(f"PNG prior is {prior.shape}, spec says "
                             f"{(spec.size, spec.size)}")
    elif spec.prior == "gmm":
        k = spec.prior_components
        means = make_corpus(k, spec.size, spec.prior_seed)
        prior = GmmPrior(weights=np.full(k, 1.0 / k), means=means,
                         variances=np.full(k, spec.gmm_variance))
    else:
        prior = EmpiricalPrior(
            data=make_corpus(spec.prior_images, spec.size, spec.prior_seed))
    return ScoreModel(prior=prior, schedule=schedule)


# ---------------- aggregation ----------------

def mean_curve(records):
    """Mean of each diagnostic column over the successful runs.

    Returns (t_grid, matrix) where matrix columns follow STEP_COLUMNS
    minus the leading t.  All runs must share the t grid.
    """
    good = [r for r in records if not r.failed and r.rows]
    if not good:
        raise ValueError("no successful runs to average")
    grids = [[row.t for row in r.rows] for r in good]
    if any(g != grids[0] for g in grids[1:]):
        raise ValueError("runs disagree on the diagnostic t grid")
    cols = STEP_COLUMNS[1:]
    stack = np.array([[[getattr(row, c) for c in cols] for row in r.rows]
                      for r in good])
    return np.array(grids[0]), stack.mean(axis=0)


def curve_ratio(t_a, m_a, t_b, m_b):
    """Elementwise ratio of two curve matrices on a shared t grid.

    A zero denominator produces +inf in that cell and flags the row.
    """
    if t_a.shape != t_b.shape or np.any(t_a != t_b):
        raise ValueError("mismatched t grids between methods")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(m_b == 0.0, np.inf, m_a / m_b)
    flags = np.array(["zero_denominator" if z else ""
                      for z in (m_b == 0.0).any(axis=1)])
    return t_a, ratio, flags


def compare_curves(records_a, records_b):
    """Ratio of two methods' mean diagnostic curves."""
    ta, ma = mean_curve(records_a)
    tb, mb = mean_curve(records_b)
    return curve_ratio(ta, ma, tb, mb)


def _write_matrix_csv(path, header, t_grid, matrix, flags=None):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, t in enumerate(t_grid):
            cells = [_fmt(int(t))] + [_fmt(v) for v in matrix[i]]
            if flags is not None:
                cells.append(flags[i])
            fh.write(",".join(cells) + "\n")


def write_ratio_csv(path, t_grid, ratio, flags):
    _write_matrix_csv(path, list(STEP_COLUMNS) + ["flag"], t_grid, ratio, flags)


# wall clock stays out of the CSV so that re-runs are byte-identical;
# it lives on the in-memory summary rows only
_SUMMARY_COLUMNS = ("method", "runs", "failures", "psnr_mean", "psnr_std",
                    "ssim_mean", "ssim_std", "mse_mean", "mse_std",
                    "nfe_x_mean", "nfe_y_mean")


def summarize(records_by_label):
    """One summary row per method: metric means/stds over successful runs."""
    rows = []
    for label, records in records_by_label.items():
        good = [r for r in records if not r.failed]
        row = {"method": label, "runs": len(records),
               "failures": len(records) - len(good)}
        for name, attr in (("psnr", "final_psnr"), ("ssim", "final_ssim"),
                           ("mse", "final_mse")):
            vals = np.array([getattr(r, attr) for r in good])
            row[f"{name}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{name}_std"] = float(vals.std()) if len(vals) else float("nan")
        row["nfe_x_mean"] = float(np.mean([r.nfe_x for r in good])) if good else float("nan")
        row["nfe_y_mean"] = float(np.mean([r.nfe_y for r in good])) if good else float("nan")
        row["wall_clock_s"] = float(sum(r.wall_clock for r in records))
        rows.append(row)
    return rows


def write_summary_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(_SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row[c] if c == "method" else _fmt(row[c])
                              for c in _SUMMARY_COLUMNS) + "\n")


# ---------------- the experiment runner ----------------

def run_experiment(spec, out_dir=None, curves_only=False):
    """Execute every (image, seed, method) cell of a spec.

    Methods share measurement and sampler RNG streams per (image, seed),
    so cross-method comparisons are paired.  A sampler divergence is
    recorded and the batch continues.  Returns a dict with the records by
    method label, the summary rows, and the output directory.
    """
    out = Path(out_dir if out_dir is not None else spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(exist_ok=True)
    (out / "ratios").mkdir(exist_ok=True)
    if not curves_only:
        (out / "images").mkdir(exist_ok=True)
        (out / "runs").mkdir(exist_ok=True)

    schedule = make_linear_schedule(spec.T, beta_start=spec.beta_start,
                                    beta_end=spec.beta_end,
                                    sigma_mode=spec.sigma_mode)
    op = build_operator(spec)
    noise = build_noise(spec)
    x_model = build_prior_model(spec, schedule)
    needs_craft = any(m.method in CRAFT_METHODS for m in spec.methods)
    y_model = (make_measurement_model(x_model, op, noise, mode=spec.craft_mode)
               if needs_craft else None)

    truths = make_corpus(spec.images, spec.size, spec.test_seed)
    records_by_label = {m.label: [] for m in spec.methods}

    for i in range(spec.images):
        truth = truths[i]
        if not curves_only:
            write_png_gray(truth, out / "images" / f"truth_img{i:03d}.png")
        for s in spec.seeds:
            root = cell_seed(i, s)
            y = degrade_with_root(op, noise, truth, root)
            if not curves_only:
                write_png_gray(y,
                               out / "images" / f"meas_img{i:03d}_seed{s:02d}.png")
            for cfg in spec.methods:
                try:
                    final, rec = run(cfg, schedule, x_model, y_model, op, y,
                                     make_streams(root), x_true=truth,
                                     diag_stride=spec.diag_stride)
                except SamplerDivergence as e:
                    rec = RunRecord(method=cfg.label,
                                    config_echo=asdict(cfg),
                                    failed=True, failure=str(e))
                    final = None
                records_by_label[cfg.label].append(rec)
                if curves_only:
                    continue
                run_dir = out / "runs" / cfg.label
                run_dir.mkdir(exist_ok=True)
                with open(run_dir / f"img{i:03d}_seed{s:02d}.csv", "w") as fh:
                    if rec.failed:
                        fh.write(f"# failed: {rec.failure}\n")
                    write_record_csv(rec, fh)
                if final is not None:
                    write_png_gray(
                        np.clip(final, 0.0, 1.0),
                        out / "images" /
                        f"recon_{cfg.label}_img{i:03d}_seed{s:02d}.png")

    for label, records in records_by_label.items():
        if any(not r.failed and r.rows for r in records):
            t_grid, means = mean_curve(records)
            _write_matrix_csv(out / "curves" / f"{label}.csv",
                              list(STEP_COLUMNS), t_grid, means)
    baseline = spec.methods[0].label
    for cfg in spec.methods[1:]:
        try:
            t_grid, ratio, flags = compare_curves(
                records_by_label[cfg.label], records_by_label[baseline])
        except ValueError:
            continue
        write_ratio_csv(out / "ratios" / f"{cfg.label}_over_{baseline}.csv",
                        t_grid, ratio, flags)

    rows = summarize(records_by_label)
    write_summary_csv(out / "summary.csv", rows)
    write_report(out / "report.txt", spec, rows, records_by_label,
                 y_model.note if (y_model is not None and y_model is not x_model)
                 else "shared prior" if needs_craft else "")
    return {"records": records_by_label, "summary": rows, "out_dir": out}


def degrade_with_root(op, noise, truth, root):
    """Degrade through the dedicated measurement stream for this cell."""
    return degrade(op, noise, truth, measurement_rng(root))


def write_report(path, spec, summary_rows, records_by_label, craft_note):
    """Plain-text run report; the timestamp lives only in the header line."""
    lines = [f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    lines.append(f"task: {spec.operator} on {spec.size}x{spec.size}, "
                 f"noise {spec.noise} "
                 f"({'lam=%g' % spec.noise_lam if spec.noise == 'poisson' else 'sigma=%g' % spec.noise_sigma})")
    lines.append(f"prior: {spec.prior} "
                 f"({spec.prior_images if spec.prior == 'empirical' else spec.prior_components} sources)")
    lines.append(f"schedule: T={spec.T} linear beta [{spec.beta_start:g}, "
                 f"{spec.beta_end:g}], sigma mode {spec.sigma_mode}")
    lines.append(f"scale: {spec.images} images x {len(spec.seeds)} seeds "
                 f"per method")
    if craft_note:
        lines.append(f"crafted trajectory prior: {craft_note}")
    lines.append("")
    lines.append(f"{'method':<16}{'psnr':>16}{'ssim':>16}{'mse':>16}{'fail':>8}")
    for row in summary_rows:
        lines.append(f"{row['method']:<16}"
                     f"{row['psnr_mean']:>9.3f}+-{row['psnr_std']:<5.3f}"
                     f"{row['ssim_mean']:>10.4f}+-{row['ssim_std']:<4.3f}"
                     f"{row['mse_mean']:>10.3g}+-{row['mse_std']:<4.2g}"
                     f"{row['failures']:>4d}/{row['runs']:<4d}")
    failures = [(label, r.failure)
                for label, recs in records_by_label.items()
                for r in recs if r.failed]
    lines.append("")
    if failures:
        lines.append("failures:")
        lines.extend(f"  {label}: {msg}" for label, msg in failures)
    else:
        lines.append("failures: none")
    Path(path).write_text("\n".join(lines) + "\n")
