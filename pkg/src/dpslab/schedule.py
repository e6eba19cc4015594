"""Discrete VP noise schedule and the elementary DDPM kinematics.

Timesteps run t = 1..T with t = 0 denoting clean data.  Arrays are stored
with length T + 1 so that index t is the semantic timestep; index 0 holds
the clean-data conventions (beta = 0, alpha_bar = 1) which also make the
posterior-variance sigma formula well defined at t = 1.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar/sigma ladder shared by all samplers.

    Fields are arrays of length T + 1, indexed by timestep (entry 0 is the
    clean-data convention row and is never used as a step).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t):
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def make_linear_schedule(T, beta_start=1e-4, beta_end=0.02,
                         sigma_mode="beta", deterministic_final=True):
    """Build a linear-beta VP schedule.

    Args:
        T: number of diffusion steps, >= 2.
        beta_start, beta_end: endpoints of the linear beta ramp,
            0 < beta_start < beta_end < 1.
        sigma_mode: "beta" for sigma_t = sqrt(beta_t), or "posterior" for
            sqrt((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t).
        deterministic_final: force sigma_1 = 0 so the last reverse step
            (t = 1 -> 0) emits no noise.

    Returns:
        NoiseSchedule with alpha, alpha_bar and sigma derived from beta.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if sigma_mode not in ("beta", "posterior"):
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")

    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    if sigma_mode == "beta":
        sigma = np.sqrt(beta)
    else:
        sigma = np.zeros(T + 1)
        # alpha_bar[t-1] at t=1 is the clean-data entry 1.0, giving sigma_1 = 0.
        sigma[1:] = np.sqrt(
            (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:])
    if deterministic_final:
        sigma[1] = 0.0
    sigma[0] = 0.0

    return NoiseSchedule(T=T, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, sigma=sigma)


def forward_sample(schedule, x0, t, z):
    """Noise clean data to level t: sqrt(abar_t) x0 + sqrt(1 - abar_t) z."""
    schedule.check_t(t)
    x0 = np.asarray(x0, dtype=float)
    z = np.asarray(z, dtype=float)
    if x0.shape != z.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs z {z.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def reverse_step_mean(schedule, x_t, score, t):
    """Mean of the ancestral reverse step; the caller adds sigma_t z itself.

    Returns (x_t + beta_t * score) / sqrt(1 - beta_t).
    """
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=float)
    score = np.asarray(score, dtype=float)
    if x_t.shape != score.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs score {score.shape}")
    b = schedule.beta[t]
    return (x_t + b * score) / np.sqrt(1.0 - b)


def dump_csv(schedule, fh):
    """Write the realized ladder as CSV rows (t, beta, alpha_bar, sigma)."""
    fh.write("t,beta,alpha_bar,sigma\n")
    for t in range(1, schedule.T + 1):
        fh.write("%d,%.17g,%.17g,%.17g\n"
                 % (t, schedule.beta[t], schedule.alpha_bar[t], schedule.sigma[t]))
