"""Exact score functions, Tweedie posterior means, and their VJPs.

Two prior families share one isotropic-mixture code path: a Gaussian
mixture whose time-t marginal component k is
Normal(sqrt(abar_t) mu_k, (abar_t v_k + 1 - abar_t) I), and an empirical
dataset whose marginal is the N-point mixture
Normal(sqrt(abar_t) d_i, (1 - abar_t) I).  A third family carries full
per-component covariances for small dimensions; the craft module uses it
for exact pushforward priors.

All responsibilities are computed in log space (log-sum-exp), so scores
stay finite for states far into the tails.
"""

from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GmmPrior:
    """Isotropic Gaussian mixture: weights (K,), means (K, *shape), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))
        K = self.weights.shape[0]
        if self.means.shape[0] != K or self.variances.shape[0] != K:
            raise ValueError("weights, means, variances disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()}, not 1")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")

    @property
    def shape(self):
        return self.means.shape[1:]


@dataclass(frozen=True)
class EmpiricalPrior:
    """Dataset prior: data (N, *shape), N >= 1."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        if self.data.shape[0] < 1:
            raise ValueError("empirical prior needs at least one data point")

    @property
    def shape(self):
        return self.data.shape[1:]


@dataclass(frozen=True)
class FullCovGmmPrior:
    """Mixture with full per-component covariance; small dimensions only.

    means are (K, *shape); covs are (K, dim, dim) over the flattened signal.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        K = self.weights.shape[0]
        dim = int(np.prod(self.means.shape[1:]))
        if self.covs.shape != (K, dim, dim):
            raise ValueError(f"covs must be ({K}, {dim}, {dim}), got {self.covs.shape}")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def shape(self):
        return self.means.shape[1:]


@dataclass(frozen=True)
class ScoreModel:
    """A prior bound to a noise schedule; all evaluations are pure in (x, t)."""

    prior: object
    schedule: NoiseSchedule
    note: str = field(default="")

    @property
    def shape(self):
        return self.prior.shape


# ---------------- isotropic mixture internals ----------------

def _iso_components(prior, schedule, t):
    """Time-t means (K, dim), variances (K,), and log weights of the marginal."""
    ab = schedule.alpha_bar[t]
    if isinstance(prior, GmmPrior):
        K = prior.weights.shape[0]
        m = np.sqrt(ab) * prior.means.reshape(K, -1)
        s = ab * prior.variances + (1.0 - ab)
        logw = np.log(prior.weights)
    else:
        N = prior.data.shape[0]
        m = np.sqrt(ab) * prior.data.reshape(N, -1)
        s = np.full(N, 1.0 - ab)
        logw = np.full(N, -np.log(N))
    return m, s, logw


def _responsibilities(m, s, logw, xf):
    """Posterior component weights r (K,) and per-component scores g (K, dim).

    Computed via log-sum-exp; components whose log responsibility falls
    below the exp underflow threshold contribute exactly zero.
    """
    diff = xf[None, :] - m
    dim = xf.shape[0]
    logpost = logw - 0.5 * np.einsum("kd,kd->k", diff, diff) / s \
        - 0.5 * dim * np.log(2.0 * np.pi * s)
    mx = logpost.max()
    r = np.exp(logpost - mx)
    r /= r.sum()
    g = -diff / s[:, None]
    return r, g


def _check_eval(model, x, t):
    model.schedule.check_t(t)
    x = np.asarray(x, dtype=float)
    if x.shape != model.shape:
        raise ValueError(f"signal shape {x.shape} does not match prior shape {model.shape}")
    return x


def score(model, x, t):
    """Exact score of the model's time-t marginal at x.

    Args:
        model: ScoreModel.
        x: signal with the prior's shape.
        t: timestep in 1..T.

    Returns:
        grad log p_t(x), same shape as x.
    """
    x = _check_eval(model, x, t)
    if isinstance(model.prior, FullCovGmmPrior):
        return _fullcov_score(model, x, t)
    m, s, logw = _iso_components(model.prior, model.schedule, t)
    r, g = _responsibilities(m, s, logw, x.reshape(-1))
    return (r @ g).reshape(x.shape)


def x0hat_from_score(model, x_t, t, s):
    """Tweedie estimate from an already computed score value.

    Callers that need both the score and the clean estimate go through
    here so the formula has a single site.
    """
    ab = model.schedule.alpha_bar[t]
    return (x_t + (1.0 - ab) * s) / np.sqrt(ab)


def tweedie_x0hat(model, x_t, t):
    """Posterior-mean estimate of clean data from a noisy state.

    Returns (x_t + (1 - abar_t) score(x_t, t)) / sqrt(abar_t); implemented
    directly on top of score so the two can never disagree.
    """
    x_t = _check_eval(model, x_t, t)
    return x0hat_from_score(model, x_t, t, score(model, x_t, t))


def x0hat_vjp(model, x_t, t, v):
    """Pull a cotangent back through the Tweedie estimate.

    The Jacobian J = d x0hat / d x_t = (I + (1 - abar) H) / sqrt(abar),
    with H the Hessian of log p_t.  H is symmetric, so v^T J = J v and the
    product costs one responsibility pass, O(K * dim), never forming J.

    Args:
        v: cotangent with the same shape as x_t.

    Returns:
        v^T J reshaped to the signal shape.
    """
    x_t = _check_eval(model, x_t, t)
    v = np.asarray(v, dtype=float)
    if v.shape != x_t.shape:
        raise ValueError(f"cotangent shape {v.shape} != state shape {x_t.shape}")
    ab = model.schedule.alpha_bar[t]
    vf = v.reshape(-1)
    if isinstance(model.prior, FullCovGmmPrior):
        hv = _fullcov_hess_vec(model, x_t, t, vf)
    else:
        m, s, logw = _iso_components(model.prior, model.schedule, t)
        r, g = _responsibilities(m, s, logw, x_t.reshape(-1))
        sc = r @ g
        hv = (r * (g @ vf)) @ g - sc * (sc @ vf) - (r / s).sum() * vf
    out = (vf + (1.0 - ab) * hv) / np.sqrt(ab)
    return out.reshape(x_t.shape)


# ---------------- full-covariance internals ----------------

def _fullcov_marginal(model, t):
    """Per-component time-t means (K, dim) and covariances (K, dim, dim)."""
    p = model.prior
    ab = model.schedule.alpha_bar[t]
    K = p.weights.shape[0]
    dim = p.covs.shape[1]
    m = np.sqrt(ab) * p.means.reshape(K, -1)
    S = ab * p.covs + (1.0 - ab) * np.eye(dim)[None, :, :]
    return m, S


def _fullcov_resp(model, x, t):
    p = model.prior
    m, S = _fullcov_marginal(model, t)
    xf = x.reshape(-1)
    diff = xf[None, :] - m
    K = m.shape[0]
    g = np.empty_like(diff)
    logpost = np.empty(K)
    for k in range(K):
        L = np.linalg.cholesky(S[k])
        w = np.linalg.solve(L, diff[k])
        g[k] = -np.linalg.solve(L.T, w)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        logpost[k] = np.log(p.weights[k]) - 0.5 * (w @ w) \
            - 0.5 * (logdet + m.shape[1] * np.log(2.0 * np.pi))
    mx = logpost.max()
    r = np.exp(logpost - mx)
    r /= r.sum()
    return r, g, S


def _fullcov_score(model, x, t):
    r, g, _ = _fullcov_resp(model, x, t)
    return (r @ g).reshape(x.shape)


def _fullcov_hess_vec(model, x, t, vf):
    r, g, S = _fullcov_resp(model, x, t)
    sc = r @ g
    hv = (r * (g @ vf)) @ g - sc * (sc @ vf)
    for k in range(r.shape[0]):
        if r[k] == 0.0:
            continue
        hv -= r[k] * np.linalg.solve(S[k], vf)
    return hv


# ---------------- prior file formats ----------------

EMPIRICAL_MAGIC = b"DLABEMP1"


def save_gmm_csv(prior, path):
    with open(path, "w") as fh:
        K = prior.weights.shape[0]
        flat = prior.means.reshape(K, -1)
        for k in range(K):
            cells = [repr(float(prior.weights[k])), repr(float(prior.variances[k]))]
            cells += [repr(float(v)) for v in flat[k]]
            fh.write(",".join(cells) + "\n")


def load_gmm_csv(path, shape=None):
    """Read a mixture from CSV rows of (weight, variance, mean vector)."""
    weights, variances, means = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [float(c) for c in line.split(",")]
            if len(cells) < 3:
                raise ValueError(f"GMM row needs weight, variance, mean...: {line!r}")
            weights.append(cells[0])
            variances.append(cells[1])
            means.append(cells[2:])
    means = np.array(means)
    if shape is not None:
        means = means.reshape((len(weights),) + tuple(shape))
    return GmmPrior(np.array(weights), means, np.array(variances))


def save_empirical_bin(prior, path):
    """Write the dataset as magic, uint32 count/ndim/dims, float64 payload."""
    import struct

    d = prior.data
    with open(path, "wb") as fh:
        fh.write(EMPIRICAL_MAGIC)
        fh.write(struct.pack("<II", d.shape[0], d.ndim - 1))
        for n in d.shape[1:]:
            fh.write(struct.pack("<I", n))
        fh.write(d.astype("<f8").tobytes())


def load_empirical_bin(path):
    import struct

    with open(path, "rb") as fh:
        magic = fh.read(len(EMPIRICAL_MAGIC))
        if magic != EMPIRICAL_MAGIC:
            raise ValueError(f"{path}: not an empirical-prior file (magic {magic!r})")
        count, ndim = struct.unpack("<II", fh.read(8))
        dims = struct.unpack("<%dI" % ndim, fh.read(4 * ndim))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    expect = count * int(np.prod(dims))
    if payload.size != expect:
        raise ValueError(f"{path}: payload has {payload.size} values, expected {expect}")
    return EmpiricalPrior(payload.reshape((count,) + dims).copy())


def load_empirical_png_dir(path):
    """Load every PNG under path (sorted by name) as a [0,1] grayscale stack."""
    from .pngio import read_png_gray
    import os

    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG files in {path}")
    imgs = [read_png_gray(os.path.join(path, n)) for n in names]
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise ValueError(f"PNG shapes differ: {sorted(shapes)}")
    return EmpiricalPrior(np.stack(imgs))
