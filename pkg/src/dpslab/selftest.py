"""Deterministic oracle battery behind the `selftest` subcommand.

Every check is seeded and timestamp-free, so two invocations print
byte-identical output.  The battery repeats the sharpest invariants from
the test suite in a form that needs no test runner: brute-force oracles
for the transforms, finite differences for the gradients, and bitwise
equality for the method equivalences.
"""

import io

import numpy as np

from .craft import make_measurement_model
from .diagnostics import fft2, freq_ratio, write_record_csv
from .operators import (BoxMask, Downsample4x, GaussianBlur, GaussianNoise,
                        Identity, MotionBlur, RandomMask, degrade)
from .samplers import SamplerConfig, make_streams, measurement_rng, run
from .schedule import make_linear_schedule
from .score import (EmpiricalPrior, GmmPrior, ScoreModel, score,
                    tweedie_x0hat, x0hat_vjp)

_SCHED = make_linear_schedule(T=200)


def _fd_gradient(f, x, delta=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += delta
        xm = x.copy()
        xm[idx] -= delta
        g[idx] = (f(xp) - f(xm)) / (2.0 * delta)
    return g


def _mixture_model(dim, seed=0, k=2):
    rng = np.random.default_rng(seed)
    w = rng.random(k)
    prior = GmmPrior(weights=w / w.sum(), means=rng.normal(size=(k, dim)),
                     variances=0.4 + rng.random(k))
    return ScoreModel(prior=prior, schedule=_SCHED)


def _check_schedule_cumprod():
    sched = make_linear_schedule(T=200)
    acc = 1.0
    for t in range(1, 201):
        acc *= 1.0 - sched.beta[t]
        assert abs(sched.alpha_bar[t] - acc) < 1e-12 * max(acc, 1e-300), \
            f"alpha_bar[{t}] off"
    assert sched.alpha_bar[0] == 1.0 and sched.beta[0] == 0.0


def _check_score_fd():
    model = _mixture_model(5, seed=1)
    x = np.random.default_rng(2).normal(size=5)
    t = 120
    m, s, logw = _marginal_params(model, t)

    def logp(q):
        quad = -0.5 * np.sum((q[None, :] - m) ** 2, axis=1) / s
        return _logsumexp(logw + quad - 0.5 * 5 * np.log(2 * np.pi * s))

    got = score(model, x, t)
    want = _fd_gradient(logp, x, delta=1e-6)
    err = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert err < 1e-6, f"score FD error {err:.2e}"


def _marginal_params(model, t):
    ab = model.schedule.alpha_bar[t]
    p = model.prior
    return (np.sqrt(ab) * p.means, ab * p.variances + (1 - ab),
            np.log(p.weights))


def _logsumexp(a):
    mx = a.max()
    return mx + np.log(np.sum(np.exp(a - mx)))


def _check_tweedie_gaussian():
    prior = GmmPrior(weights=np.array([1.0]), means=np.zeros((1, 6)),
                     variances=np.array([1.0]))
    model = ScoreModel(prior=prior, schedule=_SCHED)
    x = np.random.default_rng(3).normal(size=6)
    for t in (1, 120, 199):
        ab = _SCHED.alpha_bar[t]
        got = tweedie_x0hat(model, x, t)
        err = np.max(np.abs(got - np.sqrt(ab) * x))
        assert err < 1e-10 * max(1.0, np.max(np.abs(x))), \
            f"tweedie at t={t} err {err:.2e}"


def _check_vjp_fd():
    model = _mixture_model(6, seed=4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=6)
    v = rng.normal(size=6)
    t = 120
    got = x0hat_vjp(model, x, t, v)
    want = _fd_gradient(lambda q: float(v @ tweedie_x0hat(model, q, t)), x)
    err = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert err < 1e-4, f"vjp FD error {err:.2e}"


def _check_adjoints():
    shape = (8, 8)
    ops = [Identity(shape), GaussianBlur(shape, 5, 1.0),
           MotionBlur(shape, 5, 0.4), Downsample4x(shape),
           RandomMask(shape, 0.5, np.random.default_rng(0)),
           BoxMask(shape, 4, 4)]
    rng = np.random.default_rng(6)
    for op in ops:
        u = rng.normal(size=op.in_shape)
        w = rng.normal(size=op.out_shape)
        lhs = float(np.sum(op.apply(u) * w))
        rhs = float(np.sum(u * op.vjp(u, w)))
        gap = abs(lhs - rhs) / max(abs(lhs), 1e-12)
        assert gap < 1e-10, f"{op.kind} adjoint gap {gap:.2e}"


def _check_fft_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(8, 8))
    got = fft2(x)
    want = np.zeros((8, 8), dtype=complex)
    for u in range(8):
        for v in range(8):
            for a in range(8):
                for b in range(8):
                    want[u, v] += x[a, b] * np.exp(-2j * np.pi * (u * a + v * b) / 8)
    assert np.max(np.abs(got - want)) < 1e-10, "fft2 differs from brute DFT"
    pars = abs(np.sum(np.abs(got) ** 2) / 64 - np.sum(x ** 2))
    assert pars < 1e-8 * np.sum(x ** 2), "Parseval violated"


def _check_freq_ratio_edges():
    const = np.full((16, 16), 0.7)
    assert freq_ratio(const, 2) == 0.0, "constant image should give 0"
    cb = np.indices((16, 16)).sum(axis=0) % 2 * 2.0 - 1.0
    assert freq_ratio(cb, 2) == np.inf, "checkerboard should give +inf"


def _empirical_setup():
    shape = (8, 8)
    sched = make_linear_schedule(T=40)
    rng = np.random.default_rng(8)
    x_model = ScoreModel(prior=EmpiricalPrior(data=rng.random((6,) + shape)),
                         schedule=sched)
    op = GaussianBlur(shape, 5, 1.0)
    truth = x_model.prior.data[0]
    y = degrade(op, GaussianNoise(0.05), truth, measurement_rng(0))
    return sched, x_model, op, truth, y


def _check_crafted_mu_zero_equivalence():
    sched, x_model, op, truth, y = _empirical_setup()
    y_model = make_measurement_model(x_model, op, GaussianNoise(0.05))
    cm = SamplerConfig(method="dpscm", T=40, zeta=0.3, omega=0.5, mu=0.0)
    dps = SamplerConfig(method="dps", T=40, zeta=0.3)
    xa, _ = run(cm, sched, x_model, y_model, op, y, make_streams(1))
    xb, _ = run(dps, sched, x_model, None, op, y, make_streams(1))
    assert np.array_equal(xa, xb), "mu=0 crafted run differs from plain"


def _check_mc_single_sample_equivalence():
    sched, x_model, op, truth, y = _empirical_setup()
    lgd = SamplerConfig(method="lgd_mc", T=40, zeta=0.3, mc_samples=1,
                        proposal_width=0.0)
    dps = SamplerConfig(method="dps", T=40, zeta=0.3, guidance_norm="squared")
    xa, _ = run(lgd, sched, x_model, None, op, y, make_streams(1))
    xb, _ = run(dps, sched, x_model, None, op, y, make_streams(1))
    assert np.array_equal(xa, xb), "single-sample MC run differs from squared"


def _check_shared_craft_identity():
    sched, x_model, op, truth, y = _empirical_setup()
    y_model = make_measurement_model(x_model, op, GaussianNoise(0.05))
    assert y_model is x_model, "shape-preserving task should share the prior"


def _check_record_determinism():
    sched, x_model, op, truth, y = _empirical_setup()
    cfg = SamplerConfig(method="dpscm", T=40, zeta=0.3, omega=0.5, mu=0.5)
    y_model = make_measurement_model(x_model, op, GaussianNoise(0.05))
    outs = []
    for _ in range(2):
        _, rec = run(cfg, sched, x_model, y_model, op, y, make_streams(2),
                     x_true=truth, diag_stride=5)
        fh = io.StringIO()
        write_record_csv(rec, fh)
        outs.append(fh.getvalue())
    assert outs[0] == outs[1], "repeated run is not byte-identical"


def _check_conjugate_pull():
    sigma = 0.05
    prior = GmmPrior(weights=np.array([1.0]), means=np.zeros((1, 8)),
                     variances=np.array([1.0]))
    model = ScoreModel(prior=prior, schedule=_SCHED)
    op = Identity((8,))
    truth = np.random.default_rng(9).standard_normal(8)
    y = degrade(op, GaussianNoise(sigma), truth, measurement_rng(4))
    post_mean = y / (1.0 + sigma ** 2)
    xd, _ = run(SamplerConfig(method="dps", T=200, zeta=0.1), _SCHED, model,
                None, op, y, make_streams(4))
    xu, _ = run(SamplerConfig(method="unconditional", T=200), _SCHED, model,
                None, op, y, make_streams(4))
    gd = np.mean((xd - post_mean) ** 2)
    gu = np.mean((xu - post_mean) ** 2)
    assert gd < gu, f"guided run ({gd:.3f}) no closer than unconditional ({gu:.3f})"


CHECKS = (
    ("schedule cumulative product", _check_schedule_cumprod),
    ("score matches density finite differences", _check_score_fd),
    ("posterior mean shrinks a Gaussian exactly", _check_tweedie_gaussian),
    ("denoiser VJP matches finite differences", _check_vjp_fd),
    ("linear operator adjoints", _check_adjoints),
    ("fft2 against brute-force DFT", _check_fft_oracle),
    ("frequency ratio edge cases", _check_freq_ratio_edges),
    ("crafted mu=0 run equals plain guidance bitwise",
     _check_crafted_mu_zero_equivalence),
    ("single-sample MC run equals squared guidance bitwise",
     _check_mc_single_sample_equivalence),
    ("shape-preserving crafted model is the prior object",
     _check_shared_craft_identity),
    ("repeated run emits identical bytes", _check_record_determinism),
    ("guidance pulls toward the conjugate posterior mean",
     _check_conjugate_pull),
)


def selftest_text():
    """Run every check; returns (report text, all passed)."""
    lines = []
    passed = 0
    for name, fn in CHECKS:
        try:
            fn()
        except AssertionError as e:
            lines.append(f"FAIL {name}: {e}")
        else:
            lines.append(f"ok   {name}")
            passed += 1
    lines.append(f"selftest: {passed}/{len(CHECKS)} checks passed")
    return "\n".join(lines) + "\n", passed == len(CHECKS)
