import math

import numpy as np
import pytest
import torch

from spiraldiff.schedule import (
    ConfigError,
    NoiseSchedule,
    build_sqrt_schedule,
    default_sigma0,
    posterior_mean_var,
    q_sample,
)

from oracles import bayes_posterior_grid


@pytest.fixture(scope="module")
def sched():
    return build_sqrt_schedule(2000, 1e-4)


class TestSqrtSchedule:
    def test_lengths(self, sched):
        assert sched.T == 2000
        assert sched.beta[1:].shape == (2000,)
        assert sched.alpha_bar.shape == (2001,)

    def test_first_values(self, sched):
        assert sched.alpha_bar[0] == 1.0
        assert sched.alpha_bar[1] == pytest.approx(1 - math.sqrt(1 / 2000 + 1e-4), abs=1e-12)
        assert sched.alpha_bar[1] == pytest.approx(0.97551, abs=5e-6)

    @pytest.mark.parametrize("T", [1, 2, 7, 200, 2000])
    def test_invariants(self, T):
        s = build_sqrt_schedule(T)
        b = s.beta[1:]
        assert np.all((b > 0) & (b < 1))
        assert np.all(np.diff(s.alpha_bar) < 0)
        np.testing.assert_allclose(s.alpha_bar[1:], s.alpha[1:] * s.alpha_bar[:-1], rtol=1e-15)
        prev, cur = s.alpha_bar[:-1], s.alpha_bar[1:]
        np.testing.assert_allclose(s.posterior_var[1:], (1 - prev) / (1 - cur) * b, rtol=1e-12)
        np.testing.assert_allclose(s.post_coef_x0[1:], np.sqrt(prev) * b / (1 - cur), rtol=1e-12)
        np.testing.assert_allclose(
            s.post_coef_xt[1:], np.sqrt(s.alpha[1:]) * (1 - prev) / (1 - cur), rtol=1e-12
        )

    def test_tail_clipped(self, sched):
        assert sched.beta[-1] <= 0.999
        assert sched.alpha_bar[-1] < sched.alpha_bar[1]
        assert sched.alpha_bar[-1] > 0

    @pytest.mark.parametrize("T,s", [(0, 1e-4), (-3, 1e-4), (10, 0.0), (10, 1.0), (10, -0.1)])
    def test_rejects_bad_config(self, T, s):
        with pytest.raises(ConfigError):
            build_sqrt_schedule(T, s)

    def test_sigma0_default_is_zero(self, sched):
        # the first posterior variance vanishes because alpha_bar_0 = 1
        assert default_sigma0(sched) == 0.0

    def test_arrays_read_only(self, sched):
        with pytest.raises(ValueError):
            sched.beta[3] = 0.5


class TestQSample:
    def test_zero_signal(self, sched):
        eps = np.random.default_rng(0).normal(size=(4, 3))
        out = q_sample(sched, np.zeros((4, 3)), 37, eps)
        np.testing.assert_array_equal(out, np.sqrt(1 - sched.alpha_bar[37]) * eps)

    def test_noiseless(self, sched):
        x0 = np.random.default_rng(1).normal(size=(4, 3))
        out = q_sample(sched, x0, 500, np.zeros_like(x0))
        np.testing.assert_array_equal(out, np.sqrt(sched.alpha_bar[500]) * x0)

    def test_torch_batched_t(self, sched):
        x0 = torch.randn(3, 5, 2, dtype=torch.float64)
        eps = torch.randn(3, 5, 2, dtype=torch.float64)
        t = torch.tensor([1, 10, 2000])
        out = q_sample(sched, x0, t, eps)
        for i, ti in enumerate(t.tolist()):
            ab = sched.alpha_bar[ti]
            torch.testing.assert_close(out[i], math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * eps[i])

    def test_errors(self, sched):
        x = np.zeros((2, 2))
        with pytest.raises(ValueError):
            q_sample(sched, x, 0, x)
        with pytest.raises(ValueError):
            q_sample(sched, x, 2001, x)
        with pytest.raises(ValueError):
            q_sample(sched, x, 5, np.zeros((2, 3)))

    def test_monte_carlo_moments(self, sched):
        rng = np.random.default_rng(7)
        x0 = np.array([1.5, -0.7, 0.0])
        n = 100_000
        for t in (1, 250, 1999):
            out = q_sample(sched, np.broadcast_to(x0, (n, 3)), t, rng.normal(size=(n, 3)))
            ab = sched.alpha_bar[t]
            assert np.all(np.abs(out.mean(0) - np.sqrt(ab) * x0) <= 3 * np.sqrt((1 - ab) / n))
            assert np.all(np.abs(out.var(0) / (1 - ab) - 1) <= 0.05)

    def test_recomposition(self):
        """Iterating the one-step kernel matches the closed form in distribution."""
        s = build_sqrt_schedule(50)
        rng = np.random.default_rng(3)
        n, t, x0 = 10_000, 30, 0.8
        x = np.full(n, x0)
        for step in range(1, t + 1):
            x = np.sqrt(1 - s.beta[step]) * x + np.sqrt(s.beta[step]) * rng.normal(size=n)
        closed = q_sample(s, np.full(n, x0), t, rng.normal(size=n))
        se = np.sqrt(x.var() / n + closed.var() / n)
        assert abs(x.mean() - closed.mean()) <= 3 * se
        # variance of a sample variance for Gaussians is 2 sigma^4 / (n - 1)
        var_se = np.sqrt(2 * x.var() ** 2 / (n - 1) + 2 * closed.var() ** 2 / (n - 1))
        assert abs(x.var() - closed.var()) <= 3 * var_se

    def test_deterministic(self, sched):
        x0 = torch.randn(2, 4, 3)
        eps = torch.randn(2, 4, 3)
        a = q_sample(sched, x0, 17, eps)
        b = q_sample(sched, x0, 17, eps)
        assert torch.equal(a, b)


class TestPosterior:
    def test_zero_noise_step_is_identity(self):
        s = NoiseSchedule.from_betas([0.1, 0.0, 0.2])
        x_t = np.array([0.3, -1.2])
        mean, var = posterior_mean_var(s, x_t, np.array([5.0, 7.0]), 2)
        np.testing.assert_allclose(mean, x_t)
        assert var == 0.0

    def test_first_step_coefficients_sum_to_one(self, sched):
        assert abs(sched.post_coef_x0[1] + sched.post_coef_xt[1] - 1.0) <= 1e-12
        v = np.array([0.4, -2.0, 3.3])
        mean, var = posterior_mean_var(sched, v, v, 1)
        np.testing.assert_allclose(mean, v, rtol=1e-12)
        assert var == 0.0

    def test_matches_bayes_grid(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            betas = rng.uniform(1e-3, 0.4, size=int(rng.integers(2, 30)))
            s = NoiseSchedule.from_betas(betas)
            t = int(rng.integers(2, s.T + 1))
            x_t, x0 = rng.normal(scale=2.0, size=2)
            mean, var = posterior_mean_var(s, np.array([x_t]), np.array([x0]), t)
            g_mean, g_var = bayes_posterior_grid(s.alpha_bar[t - 1], s.beta[t], x_t, x0)
            assert abs(mean[0] - g_mean) <= 1e-6 * abs(g_mean)
            assert abs(var - g_var) <= 1e-6 * g_var

    def test_errors(self, sched):
        x = np.zeros(3)
        with pytest.raises(ValueError):
            posterior_mean_var(sched, x, x, 0)
        with pytest.raises(ValueError):
            posterior_mean_var(sched, x, np.zeros(2), 3)
