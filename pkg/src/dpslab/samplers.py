"""Guided reverse-diffusion samplers as one parameterized engine.

Methods: unconditional ancestral sampling, measurement-guided sampling
(dps), its noised-target variant (dps_yt, single- and multi-sample), Monte
Carlo loss-guided sampling (lgd_mc), the crafted-measurement method (dpscm)
and its Poisson-weighted variant (dpscm_poisson), plus an accelerated mode
that freezes the crafted trajectory below a timestep cutoff.

State entering iteration t is the time-t state; the loop runs t = T-1 down
to 1 and the final iteration produces the clean estimate.  The crafted
trajectory and the restoration trajectory consume independent RNG streams,
so method comparisons on a shared x-stream are paired experiments.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diagnostics import (RunRecord, StepRow, default_cutoff,
                          eps_prediction_error, freq_ratio, psnr, recon_error,
                          ssim)
from .schedule import reverse_step_mean
from .score import score, x0hat_from_score, x0hat_vjp

METHODS = ("unconditional", "dps", "dps_yt", "lgd_mc", "dpscm", "dpscm_poisson")
CRAFT_METHODS = ("dpscm", "dpscm_poisson")


class SamplerDivergence(RuntimeError):
    """A trajectory left the finite range; names the step and quantity."""

    def __init__(self, t, quantity):
        super().__init__(f"non-finite {quantity} at timestep {t}")
        self.t = t
        self.quantity = quantity


@dataclass
class SamplerConfig:
    """Per-method knobs; zeta/omega are constant across t by default.

    accel_cutoff > 0 forces the measurement-mixing weight mu to zero for
    t < accel_cutoff and halts the crafted trajectory there.
    """

    method: str
    T: int = 1000
    zeta: float = 1.0
    omega: float = 1.0
    mu: float = 0.5
    mc_samples: int = 1
    proposal_width: float = 0.05
    accel_cutoff: int = 0
    poisson_floor: float = 1e-3
    guidance_norm: str = "unsquared"
    label: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.zeta < 0 or self.omega < 0:
            raise ValueError("zeta and omega must be >= 0")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.proposal_width < 0:
            raise ValueError("proposal_width must be >= 0")
        if not (0 <= self.accel_cutoff <= self.T):
            raise ValueError(f"accel_cutoff must lie in [0, T], got {self.accel_cutoff}")
        if self.poisson_floor <= 0:
            raise ValueError("poisson_floor must be > 0")
        if self.guidance_norm not in ("unsquared", "squared"):
            raise ValueError(f"guidance_norm must be unsquared or squared, "
                             f"got {self.guidance_norm!r}")
        if not self.label:
            self.label = self.method


@dataclass
class RngStreams:
    """Independent generators: x-noise, y-noise, MC draws, diagnostics.

    The measurement-noise stream is deliberately absent; only degrade may
    consume it, and the harness holds it separately.
    """

    x: np.random.Generator
    y: np.random.Generator
    mc: np.random.Generator
    diag: np.random.Generator


_STREAM_X, _STREAM_Y, _STREAM_MEAS, _STREAM_MC, _STREAM_DIAG = range(5)


def _stream(root_seed, k):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((root_seed, k))))


def make_streams(root_seed):
    """Spawn the four sampler streams from one root seed."""
    return RngStreams(x=_stream(root_seed, _STREAM_X),
                      y=_stream(root_seed, _STREAM_Y),
                      mc=_stream(root_seed, _STREAM_MC),
                      diag=_stream(root_seed, _STREAM_DIAG))


def measurement_rng(root_seed):
    """The stream degrade uses; kept apart from every sampler stream."""
    return _stream(root_seed, _STREAM_MEAS)


# ---------------- guidance gradients ----------------

def _norm_grad_pieces(r, norm, lam=None):
    """Loss value and its gradient w.r.t. the operator output.

    norm "unsquared": ||r||, gradient -r/||r|| (0 at the minimum, the
    subgradient choice).  "squared": ||r||^2, gradient -2r.  "lambda":
    the diagonally weighted sqrt(sum lam r^2) with gradient -lam r / loss.
    """
    if norm == "squared":
        return float(np.sum(r * r)), -2.0 * r
    if norm == "lambda":
        val = float(np.sqrt(np.sum(lam * r * r)))
        if val == 0.0:
            return 0.0, np.zeros_like(r)
        return val, -(lam * r) / val
    val = float(np.sqrt(np.sum(r * r)))
    if val == 0.0:
        return 0.0, np.zeros_like(r)
    return val, -r / val


def guidance_gradient(x_t, x0hat, target, op, model, t, norm="unsquared", lam=None):
    """Gradient w.r.t. x_t of the residual norm ||target - A(x0hat(x_t))||.

    The chain runs residual -> operator VJP at x0hat -> Tweedie VJP at x_t.
    target is a constant here regardless of where the caller got it.

    Args:
        norm: "unsquared" (default), "squared", or "lambda" with lam the
            diagonal weights of the weighted norm.

    Returns:
        gradient with x_t's shape.
    """
    r = target - op.apply(x0hat)
    _, d_out = _norm_grad_pieces(r, norm, lam)
    u = op.vjp(x0hat, d_out)
    return x0hat_vjp(model, x_t, t, u)


def craft_step(y_model, schedule, y_craft, y, t, omega, rng,
               norm="unsquared", lam=None, counter=None):
    """Advance the crafted measurement one reverse step.

    Scores the crafted state, forms its clean estimate, takes an
    unconditional ancestral step, then pulls the result toward the vanilla
    measurement with step size omega.  The guidance gradient is evaluated
    at the pre-step state, as the update rule is written.

    Returns:
        (next crafted state, clean estimate y0hat of the pre-step state).
    """
    s_y = score(y_model, y_craft, t)
    if counter is not None:
        counter[0] += 1
    y0hat = x0hat_from_score(y_model, y_craft, t, s_y)
    mean = reverse_step_mean(schedule, y_craft, s_y, t)
    sig = schedule.sigma[t]
    y_next = mean + sig * rng.standard_normal(y_craft.shape) if sig > 0 else mean
    if omega != 0.0:
        _, d_y0 = _norm_grad_pieces(y0hat - y, norm, lam)
        # loss is ||y0hat - y||, so the cotangent enters with flipped sign
        grad = x0hat_vjp(y_model, y_craft, t, -d_y0)
        if counter is not None:
            counter[0] += 1
        y_next = y_next - omega * grad
    if not np.all(np.isfinite(y_next)):
        raise SamplerDivergence(t, "crafted measurement state")
    return y_next, y0hat


def _noised_target_gradient(x_t, x0hat, y, op, model, t, schedule, config, rng):
    """dps_yt guidance: targets are forward-noised copies of y, fresh per step."""
    ab = schedule.alpha_bar[t]
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if config.mc_samples == 1:
        target = a * y + b * rng.standard_normal(y.shape)
        return guidance_gradient(x_t, x0hat, target, op, model, t,
                                 norm=config.guidance_norm)
    # multi-sample form: gradient of log of the mean squared residual
    ax = op.apply(x0hat)
    total = 0.0
    d_out = np.zeros_like(ax)
    for _ in range(config.mc_samples):
        target = a * y + b * rng.standard_normal(y.shape)
        r = target - ax
        total += float(np.sum(r * r))
        d_out += -2.0 * r
    if total == 0.0:
        return np.zeros_like(x_t)
    u = op.vjp(x0hat, d_out / total)
    return x0hat_vjp(model, x_t, t, u)


def _mc_loss_gradient(x_t, x0hat, y, op, model, t, config, rng):
    """lgd_mc guidance: softmax-weighted squared-residual gradients over
    Gaussian proposals centered on the Tweedie estimate."""
    n = config.mc_samples
    width = config.proposal_width
    losses = np.empty(n)
    vjps = []
    for i in range(n):
        prop = x0hat + width * rng.standard_normal(x0hat.shape)
        r = y - op.apply(prop)
        losses[i], d_out = _norm_grad_pieces(r, "squared")
        vjps.append(op.vjp(prop, d_out))
    w = np.exp(-(losses - losses.min()))
    w /= w.sum()
    u = np.zeros_like(vjps[0])
    for i in range(n):
        u += w[i] * vjps[i]
    return x0hat_vjp(model, x_t, t, u)


# ---------------- the engine ----------------

def run(config, schedule, x_model, y_model, op, y, rngs, *,
        x_true=None, diag_stride=0, freq_cutoff=None):
    """Execute one guided reverse-diffusion run.

    Args:
        config: SamplerConfig; config.T must match schedule.T.
        x_model: prior score model on the restoration domain.
        y_model: measurement-space score model; required for the crafted
            methods, ignored otherwise.
        op: ForwardOperator with out_shape matching y.
        y: the measurement.
        rngs: RngStreams (see make_streams).
        x_true: optional ground truth; enables recon/final metrics.
        diag_stride: 0 disables per-step diagnostics; k records every k-th
            timestep (plus the first and last).
        freq_cutoff: radial cutoff for spectral rows; defaults to the desk
            scaling of the image side.

    Returns:
        (final state, RunRecord).  Divergence raises SamplerDivergence.
    """
    t0 = time.perf_counter()
    y = np.asarray(y, dtype=float)
    if config.T != schedule.T:
        raise ValueError(f"config.T={config.T} but schedule.T={schedule.T}")
    if y.shape != op.out_shape:
        raise ValueError(f"measurement shape {y.shape} != operator out {op.out_shape}")
    if x_model.shape != op.in_shape:
        raise ValueError(f"prior shape {x_model.shape} != operator in {op.in_shape}")
    crafted = config.method in CRAFT_METHODS
    if crafted and y_model is None:
        raise ValueError(f"{config.method} needs a measurement-space score model")
    if crafted and y_model.shape != op.out_shape:
        raise ValueError(f"measurement model shape {y_model.shape} != {op.out_shape}")

    poisson = config.method == "dpscm_poisson"
    norm = "lambda" if poisson else config.guidance_norm
    lam = 1.0 / np.maximum(y, config.poisson_floor) if poisson else None

    record = RunRecord(method=config.label, config_echo=asdict(config))
    if crafted and y_model.note:
        record.notes.append(y_model.note)
    if op.kind == "nonlinear_blur":
        record.notes.append("nonlinear-surrogate operator")

    # craft runs only while the effective mu is positive
    craft_any = crafted and config.mu > 0.0 and config.accel_cutoff < config.T
    nfe_y = [0]
    nfe_x = 0

    x = rngs.x.standard_normal(x_model.shape)
    y_craft = rngs.y.standard_normal(y_model.shape) if craft_any else None

    do_freq = (x.ndim == 2 and x.shape[0] == x.shape[1]
               and x.shape[0] >= 2 and (x.shape[0] & (x.shape[0] - 1)) == 0)
    if freq_cutoff is None and do_freq:
        freq_cutoff = default_cutoff(x.shape[0])

    for t in range(config.T - 1, 0, -1):
        mu_t = 0.0 if (config.accel_cutoff and t < config.accel_cutoff) else config.mu
        craft_on = crafted and mu_t > 0.0

        y0hat = None
        if craft_on:
            y_craft, y0hat = craft_step(y_model, schedule, y_craft, y, t,
                                        config.omega, rngs.y, norm=norm,
                                        lam=lam, counter=nfe_y)

        s_x = score(x_model, x, t)
        nfe_x += 1
        x0hat = x0hat_from_score(x_model, x, t, s_x)
        mean = reverse_step_mean(schedule, x, s_x, t)
        sig = schedule.sigma[t]
        x_prime = mean + sig * rngs.x.standard_normal(x.shape) if sig > 0 else mean

        if config.method == "unconditional":
            g = None
        elif config.method == "dps":
            g = guidance_gradient(x, x0hat, y, op, x_model, t, norm=norm)
            nfe_x += 1
        elif config.method == "dps_yt":
            g = _noised_target_gradient(x, x0hat, y, op, x_model, t,
                                        schedule, config, rngs.y)
            nfe_x += 1
        elif config.method == "lgd_mc":
            g = _mc_loss_gradient(x, x0hat, y, op, x_model, t, config, rngs.mc)
            nfe_x += 1
        elif mu_t == 0.0:
            g = guidance_gradient(x, x0hat, y, op, x_model, t, norm=norm, lam=lam)
            nfe_x += 1
        elif mu_t == 1.0:
            g = guidance_gradient(x, x0hat, y0hat, op, x_model, t, norm=norm, lam=lam)
            nfe_x += 1
        else:
            g_craft = guidance_gradient(x, x0hat, y0hat, op, x_model, t,
                                        norm=norm, lam=lam)
            g_meas = guidance_gradient(x, x0hat, y, op, x_model, t,
                                       norm=norm, lam=lam)
            g = mu_t * g_craft + (1.0 - mu_t) * g_meas
            nfe_x += 2

        x_new = x_prime if g is None else x_prime - config.zeta * g
        if not np.all(np.isfinite(x_new)):
            raise SamplerDivergence(t, "restoration state")

        if diag_stride and (t % diag_stride == 0 or t == 1 or t == config.T - 1):
            row = StepRow(t=t)
            row.meas_residual = float(np.linalg.norm(y - op.apply(x0hat)))
            if y0hat is not None:
                row.craft_residual = float(np.linalg.norm(y0hat - op.apply(x0hat)))
                row.craft_gap = float(np.linalg.norm(y0hat - y))
            if x_true is not None:
                row.recon_mse = recon_error(x_true, x0hat)
            row.eps_error = eps_prediction_error(x_model, schedule, x, t, rngs.diag)
            if do_freq:
                d_full = mean - x if g is None else mean - config.zeta * g - x
                row.freq_ratio_full = freq_ratio(d_full, freq_cutoff)
                if g is not None:
                    row.freq_ratio_guidance = freq_ratio(-config.zeta * g, freq_cutoff)
            record.append(row)

        x = x_new

    if x_true is not None:
        record.final_mse = recon_error(x_true, x)
        record.final_psnr = psnr(x_true, x, peak=1.0)
        if x.ndim == 2 and min(x.shape) >= 11:
            record.final_ssim = ssim(x_true, x, peak=1.0)
    record.nfe_x = nfe_x
    record.nfe_y = nfe_y[0]
    record.wall_clock = time.perf_counter() - t0
    return x, record
