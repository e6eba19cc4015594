"""Per-step diagnostics and image metrics.

The spectral ratio, noise-prediction error, and reconstruction error probe
what a guided sampler is doing at each timestep; PSNR/SSIM/MSE score final
reconstructions.  Everything here is pure given its rng draw, so records
rebuild bit-for-bit under a fixed seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .score import score, tweedie_x0hat

# Low bands whose mean magnitude falls below this fraction of the spectrum
# peak are treated as exactly zero (band-pure inputs leave ~1e-16 FFT
# residue that would otherwise masquerade as a finite ratio).
_ZERO_BAND_REL = 1e-12


def fft2(x):
    """Exact 2-d DFT of a square power-of-two channel, unnormalized forward.

    Thin precondition-checking wrapper; the transform itself is delegated
    to numpy's FFT.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"fft2 needs a square channel, got shape {x.shape}")
    n = x.shape[0]
    if n < 2 or (n & (n - 1)) != 0:
        raise ValueError(f"fft2 needs a power-of-two side, got {n}")
    return np.fft.fft2(x)


@dataclass(frozen=True)
class SpectralSplit:
    """Mean spectral magnitudes below/above a radial cutoff (DC in low)."""

    cutoff: int
    low_mag: float
    high_mag: float


def spectral_split(g, cutoff):
    """Partition the centered spectrum of g at the given radial index.

    Radial index is the floor of the Euclidean lattice distance from the
    centered DC bin; bins with index < cutoff form the low band.  A 3-d
    input is channel-averaged first.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 3:
        g = g.mean(axis=2)
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    spec = np.fft.fftshift(fft2(g))
    n = g.shape[0]
    c = n // 2
    iy, ix = np.indices((n, n))
    rad = np.floor(np.hypot(iy - c, ix - c)).astype(int)
    mag = np.abs(spec)
    return SpectralSplit(cutoff=int(cutoff),
                         low_mag=float(mag[rad < cutoff].mean()),
                         high_mag=float(mag[rad >= cutoff].mean()))


def freq_ratio(g, cutoff):
    """mean(|high band|) / mean(|low band|) of the centered spectrum of g.

    Returns +inf (the flagged sentinel) when the low band carries no
    energy; a constant image returns 0.
    """
    sp = spectral_split(g, cutoff)
    floor = _ZERO_BAND_REL * max(sp.low_mag, sp.high_mag)
    if sp.low_mag <= floor:
        return math.inf if sp.high_mag > floor else 0.0
    return sp.high_mag / sp.low_mag


def default_cutoff(n):
    """Desk scaling of the 32-cycle cutoff used at side 256: round(32 n / 256)."""
    return max(1, int(round(32.0 * n / 256.0)))


def eps_prediction_error(model, schedule, x_t, t, rng):
    """Squared noise-prediction error at a re-noised Tweedie state.

    Forms x' = sqrt(abar) x0hat + sqrt(1-abar) eps with a fresh eps, then
    returns ||eps_theta(x', t) - eps||^2 where the model's implied noise
    prediction is eps_theta = -sqrt(1-abar) * score(x', t).
    """
    schedule.check_t(t)
    x0h = tweedie_x0hat(model, x_t, t)
    eps = rng.standard_normal(x0h.shape)
    ab = schedule.alpha_bar[t]
    xp = np.sqrt(ab) * x0h + np.sqrt(1.0 - ab) * eps
    eps_theta = -np.sqrt(1.0 - ab) * score(model, xp, t)
    return float(np.sum((eps_theta - eps) ** 2))


def recon_error(x_true, x0hat):
    """Mean squared error between ground truth and the current estimate."""
    x_true = np.asarray(x_true, dtype=float)
    x0hat = np.asarray(x0hat, dtype=float)
    if x_true.shape != x0hat.shape:
        raise ValueError(f"shape mismatch {x_true.shape} vs {x0hat.shape}")
    return float(np.mean((x_true - x0hat) ** 2))


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); +inf sentinel for identical inputs."""
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = recon_error(a, b)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _valid_filter(x, w):
    """Separable valid-mode correlation with a 1-d window along both axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    a = sliding_window_view(x, len(w), axis=0) @ w
    return sliding_window_view(a, len(w), axis=1) @ w


def ssim(a, b, peak=1.0):
    """Structural similarity with the standard 11x11 sigma-1.5 window.

    Stabilizers are C1 = (0.01 peak)^2 and C2 = (0.03 peak)^2; the map is
    averaged over valid window positions, and channels are averaged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[:, :, c], b[:, :, c], peak)
                              for c in range(a.shape[2])]))
    if min(a.shape) < 11:
        raise ValueError(f"image {a.shape} smaller than the 11x11 SSIM window")
    w = _gauss_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu1, mu2 = _valid_filter(a, w), _valid_filter(b, w)
    s11 = _valid_filter(a * a, w) - mu1 * mu1
    s22 = _valid_filter(b * b, w) - mu2 * mu2
    s12 = _valid_filter(a * b, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 ** 2 + mu2 ** 2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


# ---------------- per-run records ----------------

STEP_COLUMNS = ("t", "meas_residual", "craft_residual", "craft_gap",
                "recon_mse", "eps_error", "freq_ratio_full",
                "freq_ratio_guidance")


@dataclass
class StepRow:
    """One timestep of diagnostics; absent quantities are nan."""

    t: int
    meas_residual: float = math.nan
    craft_residual: float = math.nan
    craft_gap: float = math.nan
    recon_mse: float = math.nan
    eps_error: float = math.nan
    freq_ratio_full: float = math.nan
    freq_ratio_guidance: float = math.nan


@dataclass
class RunRecord:
    """Everything one sampler run leaves behind.

    Rows are appended in sampling order, so t is strictly decreasing.
    wall_clock never enters CSV output; it is reported separately so that
    reruns stay byte-identical.
    """

    method: str
    config_echo: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    final_psnr: float = math.nan
    final_ssim: float = math.nan
    final_mse: float = math.nan
    nfe_x: int = 0
    nfe_y: int = 0
    wall_clock: float = 0.0
    notes: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""

    def append(self, row):
        if self.rows and row.t >= self.rows[-1].t:
            raise ValueError(f"step rows must be strictly decreasing in t "
                             f"(got {row.t} after {self.rows[-1].t})")
        self.rows.append(row)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return "%d" % v
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def write_record_csv(record, fh):
    fh.write(",".join(STEP_COLUMNS) + "\n")
    for row in record.rows:
        fh.write(",".join(_fmt(getattr(row, c)) for c in STEP_COLUMNS) + "\n")


def read_curve_csv(path):
    """Read a (header, float-matrix) CSV such as the ones this module writes."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = [[float(c) for c in line.strip().split(",")]
                for line in fh if line.strip()]
    return header, np.array(data)
