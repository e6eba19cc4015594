"""Score models for the measurement space.

The crafted-trajectory methods need a prior over measurements.  Two
constructions are offered.  When the operator preserves shape (blur,
masking, identity) the restoration prior itself is reused; the returned
model is the same object, so runs that compare the two cannot drift apart
numerically.  When the operator reduces dimension the prior is pushed
through it: exact for an empirical prior under a linear operator, exact
with full covariances for a mixture when the output dimension is small,
and an isotropic moment match otherwise.
"""

import numpy as np

from .score import EmpiricalPrior, FullCovGmmPrior, GmmPrior, ScoreModel

# full covariances cost a Cholesky per component per evaluation, so cap
# the exact path at a dimension where that stays cheap
FULLCOV_MAX_DIM = 64


def _noise_variance(op, noise, mean_out):
    """Per-coordinate variance proxy for the measurement noise.

    Gaussian noise contributes sigma^2 exactly.  Poisson counting noise
    has variance y / (lam * scale) at rate level y; the proxy evaluates
    that at the average forward-projected prior mean.
    """
    kind = type(noise).__name__
    if kind == "GaussianNoise":
        return noise.sigma ** 2
    if kind == "PoissonNoise":
        level = float(np.mean(np.clip(mean_out, 0.0, None)))
        return level / (noise.lam * noise.scale)
    raise ValueError(f"unsupported noise model {kind}")


def _apply_rows(op, points):
    """Push a stack of prior points through the operator."""
    return np.stack([op.apply(p) for p in points])


def _adjoint_rows(op):
    """The matrix of A as rows A^T e_i, probed through the adjoint.

    Probing the output basis keeps the probe count at the (small) output
    dimension no matter how large the input is.
    """
    n = int(np.prod(op.in_shape))
    m = int(np.prod(op.out_shape))
    b = np.empty((m, n))
    e = np.zeros(op.out_shape)
    zero_in = np.zeros(op.in_shape)
    for i in range(m):
        e.flat[i] = 1.0
        b[i] = op.vjp(zero_in, e).ravel()
        e.flat[i] = 0.0
    return b


def _frobenius_sq(op):
    """||A||_F^2 via basis probes on whichever side is smaller."""
    n = int(np.prod(op.in_shape))
    m = int(np.prod(op.out_shape))
    total = 0.0
    if m <= n:
        e = np.zeros(op.out_shape)
        zero_in = np.zeros(op.in_shape)
        for i in range(m):
            e.flat[i] = 1.0
            total += float(np.sum(op.vjp(zero_in, e) ** 2))
            e.flat[i] = 0.0
    else:
        e = np.zeros(op.in_shape)
        for j in range(n):
            e.flat[j] = 1.0
            total += float(np.sum(op.apply(e) ** 2))
            e.flat[j] = 0.0
    return total


def make_measurement_model(x_model, op, noise, mode="auto"):
    """Build the score model the crafted trajectory runs under.

    Args:
        x_model: ScoreModel for the restoration domain.
        op: ForwardOperator.
        noise: GaussianNoise or PoissonNoise instance.
        mode: "shared" reuses x_model (requires matching shapes and returns
            the identical object); "pushforward" projects the prior through
            the operator; "auto" picks shared when shapes match and
            pushforward otherwise.

    Returns:
        ScoreModel over op.out_shape; its note records the construction.
    """
    if mode not in ("auto", "shared", "pushforward"):
        raise ValueError(f"unknown mode {mode!r}")
    if x_model.shape != op.in_shape:
        raise ValueError(f"prior shape {x_model.shape} != operator input "
                         f"{op.in_shape}")
    if mode == "auto":
        mode = "shared" if op.out_shape == x_model.shape else "pushforward"
    if mode == "shared":
        if op.out_shape != x_model.shape:
            raise ValueError(f"shared mode needs matching shapes, operator "
                             f"maps {op.in_shape} -> {op.out_shape}")
        return x_model
    if not op.linear:
        raise ValueError("pushforward through a nonlinear operator is not "
                         "supported; use a shape-preserving operator or "
                         "shared mode")

    prior = x_model.prior
    if isinstance(prior, EmpiricalPrior):
        means = _apply_rows(op, prior.data)
        var = _noise_variance(op, noise, means.mean(axis=0))
        if var == 0.0:
            new = EmpiricalPrior(data=means)
            note = f"measurement model: pushforward empirical, noiseless, N={len(means)}"
        else:
            n = means.shape[0]
            new = GmmPrior(weights=np.full(n, 1.0 / n), means=means,
                           variances=np.full(n, var))
            note = (f"measurement model: pushforward empirical, N={n}, "
                    f"noise var {var:.3g}")
        return ScoreModel(prior=new, schedule=x_model.schedule, note=note)

    if isinstance(prior, GmmPrior):
        means = _apply_rows(op, prior.means)
        var = _noise_variance(op, noise, means.mean(axis=0))
        m = int(np.prod(op.out_shape))
        if m <= FULLCOV_MAX_DIM:
            b = _adjoint_rows(op)
            gram = b @ b.T
            covs = np.stack([v * gram + var * np.eye(m)
                             for v in prior.variances])
            floor = np.min(np.linalg.eigvalsh(covs), axis=None)
            if floor <= 0:
                raise ValueError("pushforward covariance is singular; the "
                                 "operator drops directions and the noise "
                                 "variance is zero")
            new = FullCovGmmPrior(weights=prior.weights, means=means, covs=covs)
            note = (f"measurement model: exact pushforward mixture, "
                    f"dim {m}, noise var {var:.3g}")
        else:
            variances = prior.variances * (_frobenius_sq(op) / m) + var
            new = GmmPrior(weights=prior.weights, means=means,
                           variances=variances)
            note = (f"measurement model: isotropic pushforward mixture, "
                    f"dim {m}, noise var {var:.3g}")
        return ScoreModel(prior=new, schedule=x_model.schedule, note=note)

    raise ValueError(f"cannot push forward prior type "
                     f"{type(prior).__name__}")
