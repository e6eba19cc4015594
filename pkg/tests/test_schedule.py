import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpslab.schedule import (NoiseSchedule, dump_csv, forward_sample,
                             make_linear_schedule, reverse_step_mean)


def brute_alpha_bar(beta):
    """Oracle: cumulative product computed with a plain loop."""
    out = []
    acc = 1.0
    for b in beta:
        acc *= (1.0 - b)
        out.append(acc)
    return np.array(out)


class TestMakeLinearSchedule:
    def test_two_step_example(self):
        s = make_linear_schedule(T=2, beta_start=0.1, beta_end=0.2)
        np.testing.assert_allclose(s.beta[1:], [0.1, 0.2])
        np.testing.assert_allclose(s.alpha_bar[1:], [0.9, 0.72])

    def test_default_ladder_against_oracle(self):
        s = make_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02)
        expect = brute_alpha_bar(s.beta[1:])
        np.testing.assert_allclose(s.alpha_bar[1:], expect, rtol=1e-12)
        assert s.alpha_bar[1000] == pytest.approx(4.04e-5, rel=2e-3)
        assert np.all(np.diff(s.alpha_bar[1:]) < 0)

    def test_rejects_bad_params(self):
        with pytest.raises(ValueError):
            make_linear_schedule(T=1, beta_start=0.1, beta_end=0.2)
        with pytest.raises(ValueError):
            make_linear_schedule(T=2, beta_start=0.2, beta_end=0.1)
        with pytest.raises(ValueError):
            make_linear_schedule(T=2, beta_start=0.0, beta_end=0.2)
        with pytest.raises(ValueError):
            make_linear_schedule(T=2, beta_start=0.1, beta_end=1.0)

    def test_sigma_modes(self):
        s = make_linear_schedule(T=10, beta_start=0.01, beta_end=0.1)
        np.testing.assert_allclose(s.sigma[2:], np.sqrt(s.beta[2:]))
        assert s.sigma[1] == 0.0

        p = make_linear_schedule(T=10, beta_start=0.01, beta_end=0.1,
                                 sigma_mode="posterior")
        for t in range(2, 11):
            want = np.sqrt((1 - p.alpha_bar[t - 1]) / (1 - p.alpha_bar[t])
                           * p.beta[t])
            assert p.sigma[t] == pytest.approx(want, rel=1e-12)
        # posterior variance vanishes at t=1 even without the explicit override
        q = make_linear_schedule(T=10, beta_start=0.01, beta_end=0.1,
                                 sigma_mode="posterior",
                                 deterministic_final=False)
        assert q.sigma[1] == 0.0

    def test_noisy_final_flag(self):
        s = make_linear_schedule(T=10, beta_start=0.01, beta_end=0.1,
                                 deterministic_final=False)
        assert s.sigma[1] == pytest.approx(np.sqrt(s.beta[1]))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 200),
       b0=st.floats(1e-6, 0.4),
       spread=st.floats(1e-6, 0.5))
def test_schedule_invariants(T, b0, spread):
    b1 = min(b0 + spread, 0.95)
    s = make_linear_schedule(T=T, beta_start=b0, beta_end=b1)
    assert np.all(np.diff(s.beta[1:]) > 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert np.all((s.alpha_bar[1:] > 0) & (s.alpha_bar[1:] < 1))
    assert np.all(np.diff(s.alpha_bar[1:]) < 0)
    # consistency abar_t = abar_{t-1} (1 - beta_t), exact to float tolerance
    np.testing.assert_allclose(s.alpha_bar[2:],
                               s.alpha_bar[1:-1] * (1 - s.beta[2:]),
                               rtol=1e-12)
    # variance preservation through the coefficients
    np.testing.assert_allclose(s.alpha_bar[1:] * 1.0 + (1 - s.alpha_bar[1:]),
                               1.0, rtol=1e-12)


class TestForwardSample:
    def setup_method(self):
        self.s = make_linear_schedule(T=2, beta_start=0.1, beta_end=0.2)

    def test_zero_noise(self):
        x0 = np.arange(4.0)
        out = forward_sample(self.s, x0, 1, np.zeros(4))
        np.testing.assert_allclose(out, np.sqrt(0.9) * x0)

    def test_zero_signal(self):
        z = np.arange(4.0)
        out = forward_sample(self.s, np.zeros(4), 2, z)
        np.testing.assert_allclose(out, np.sqrt(0.28) * z)

    def test_scalar_like_example(self):
        out = forward_sample(self.s, np.ones(1), 2, np.ones(1))
        assert out[0] == pytest.approx(0.72 ** 0.5 + 0.28 ** 0.5, abs=1e-12)
        assert out[0] == pytest.approx(1.3778, abs=5e-4)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            forward_sample(self.s, np.zeros(4), 3, np.zeros(4))
        with pytest.raises(ValueError):
            forward_sample(self.s, np.zeros(4), 1, np.zeros(5))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_affine_superposition(self, a, b):
        rng = np.random.default_rng(7)
        x1, x2 = rng.standard_normal((2, 6))
        z1, z2 = rng.standard_normal((2, 6))
        lhs = forward_sample(self.s, a * x1 + b * x2, 2, a * z1 + b * z2)
        rhs = (a * forward_sample(self.s, x1, 2, z1)
               + b * forward_sample(self.s, x2, 2, z2))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestReverseStepMean:
    def test_arithmetic_example(self):
        # beta = 0.1, x = 1, score = -1 -> (1 - 0.1)/sqrt(0.9) = sqrt(0.9)
        s = make_linear_schedule(T=2, beta_start=0.1, beta_end=0.2)
        out = reverse_step_mean(s, np.ones(3), -np.ones(3), 1)
        np.testing.assert_allclose(out, np.sqrt(0.9), rtol=1e-12)

    def test_zero_state(self):
        s = make_linear_schedule(T=5, beta_start=0.01, beta_end=0.1)
        out = reverse_step_mean(s, np.zeros(3), np.zeros(3), 4)
        np.testing.assert_allclose(out, 0.0)

    def test_tiny_beta_is_near_identity(self):
        s = make_linear_schedule(T=2, beta_start=1e-12, beta_end=1e-11)
        x = np.array([1.5, -2.0])
        out = reverse_step_mean(s, x, np.zeros(2), 1)
        np.testing.assert_allclose(out, x, rtol=1e-10)

    def test_shape_mismatch(self):
        s = make_linear_schedule(T=2, beta_start=0.1, beta_end=0.2)
        with pytest.raises(ValueError):
            reverse_step_mean(s, np.zeros(3), np.zeros(4), 1)


def test_dump_csv_roundtrip(tmp_path):
    s = make_linear_schedule(T=5, beta_start=0.01, beta_end=0.1)
    path = tmp_path / "sched.csv"
    with open(path, "w") as fh:
        dump_csv(s, fh)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "t,beta,alpha_bar,sigma"
    assert len(rows) == 6
    got = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    np.testing.assert_allclose(got[:, 1], s.beta[1:], rtol=1e-15)
    np.testing.assert_allclose(got[:, 2], s.alpha_bar[1:], rtol=1e-15)
