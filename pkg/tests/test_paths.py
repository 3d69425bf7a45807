"""Closed-form path properties: boundary pinning, flow/field consistency,
score identities, and the Gaussian marginal-field oracle."""

import numpy as np
import pytest

from flowenhance.paths import (
    DENOISE,
    OT,
    GaussianTarget,
    PathError,
    PathSpec,
    cond_flow,
    cond_score,
    cond_vector_field,
    marginal_field_oracle,
    marginal_moments,
    path_coeffs,
    posterior_mean,
    sample_conditional,
)

D1 = lambda *vals: np.array(vals, dtype=float)  # noqa: E731


class TestPathCoeffs:
    def test_denoise_boundaries(self):
        """At t=0 the mean is the noisy signal with spread sigma; at t=1 it
        is pinned to the clean target with zero spread."""
        p = PathSpec(DENOISE, sigma=0.487)
        x1, y = D1(2.0), D1(-1.0)
        mu0, s0, _, _ = path_coeffs(p, x1, y, 0.0)
        np.testing.assert_array_equal(mu0, y)
        assert s0 == 0.487
        mu1, s1, _, _ = path_coeffs(p, x1, y, 1.0)
        np.testing.assert_array_equal(mu1, x1)
        assert s1 == 0.0

    def test_denoise_midpoint_values(self):
        p = PathSpec(DENOISE, sigma=0.487)
        mu, sig, mu_dot, sig_dot = path_coeffs(p, D1(1.0), D1(0.0), 0.5)
        assert mu == pytest.approx(0.5)
        assert sig == pytest.approx(0.2435)
        assert mu_dot == pytest.approx(1.0)
        assert sig_dot == pytest.approx(-0.487)

    def test_ot_coefficients(self):
        p = PathSpec(OT, sigma=0.1)
        mu, sig, mu_dot, sig_dot = path_coeffs(p, D1(2.0), D1(5.0), 0.25)
        assert mu == pytest.approx(0.5)  # t*x1, conditioner ignored
        assert sig == pytest.approx(1.0 - 0.9 * 0.25)
        assert mu_dot == pytest.approx(2.0)
        assert sig_dot == pytest.approx(-0.9)

    def test_domain_errors(self):
        p = PathSpec()
        with pytest.raises(PathError):
            path_coeffs(p, D1(1.0), D1(0.0), 1.5)
        with pytest.raises(PathError):
            path_coeffs(p, D1(1.0), D1(0.0, 0.0), 0.5)
        with pytest.raises(PathError):
            PathSpec(sigma=-0.1)
        with pytest.raises(PathError):
            PathSpec(OT, sigma=1.0)


class TestCondFlow:
    def test_initial_condition_exact(self):
        rng = np.random.default_rng(0)
        p = PathSpec(DENOISE, sigma=0.3)
        x0, x1, y = rng.standard_normal((3, 6))
        np.testing.assert_array_equal(cond_flow(p, x0, x1, y, 0.0), x0)

    def test_terminal_pinning_exact(self):
        rng = np.random.default_rng(1)
        p = PathSpec(DENOISE, sigma=0.8)
        x0, x1, y = rng.standard_normal((3, 6))
        np.testing.assert_array_equal(cond_flow(p, x0, x1, y, 1.0), x1)

    def test_midpoint_value(self):
        p = PathSpec(DENOISE, sigma=0.487)
        out = cond_flow(p, D1(0.7), D1(1.0), D1(0.0), 0.5)
        assert out[0] == pytest.approx(0.85)

    def test_degenerate_sigma0_rejected(self):
        p = PathSpec(DENOISE, sigma=0.0)
        with pytest.raises(PathError):
            cond_flow(p, D1(0.0), D1(1.0), D1(0.0), 0.5)


class TestCondVectorField:
    def test_at_mean_equals_mean_velocity(self):
        rng = np.random.default_rng(2)
        p = PathSpec(DENOISE, sigma=0.5)
        x1, y = rng.standard_normal((2, 5))
        mu, _, mu_dot, _ = path_coeffs(p, x1, y, 0.3)
        np.testing.assert_allclose(cond_vector_field(p, mu, x1, y, 0.3), mu_dot, atol=1e-14)

    def test_midpoint_value(self):
        p = PathSpec(DENOISE, sigma=0.487)
        v = cond_vector_field(p, D1(0.6), D1(1.0), D1(0.0), 0.5)
        assert v[0] == pytest.approx(0.8)

    def test_at_t0_from_the_conditioner(self):
        p = PathSpec(DENOISE, sigma=0.487)
        v = cond_vector_field(p, D1(0.0), D1(1.0), D1(0.0), 0.0)
        assert v[0] == pytest.approx(1.0)

    def test_singular_at_t1(self):
        p = PathSpec(DENOISE, sigma=0.487)
        with pytest.raises(PathError):
            cond_vector_field(p, D1(0.5), D1(1.0), D1(0.0), 1.0)

    def test_flow_field_finite_difference_consistency(self):
        """(phi_{t+h} - phi_{t-h}) / 2h matches the field along the flow to
        1e-5 with h = 1e-4; both sides are polynomials in t."""
        rng = np.random.default_rng(3)
        h = 1e-4
        for kind in (DENOISE, OT):
            p = PathSpec(kind, sigma=0.35)
            for _ in range(20):
                x0, x1, y = rng.standard_normal((3, 4))
                t = rng.uniform(0.05, 0.9)
                fd = (cond_flow(p, x0, x1, y, t + h) - cond_flow(p, x0, x1, y, t - h)) / (2 * h)
                xt = cond_flow(p, x0, x1, y, t)
                np.testing.assert_allclose(fd, cond_vector_field(p, xt, x1, y, t), atol=1e-5)


class TestSampleConditional:
    def test_pinned_at_t1(self):
        p = PathSpec(DENOISE, sigma=0.9)
        x1, y = D1(3.0, -2.0), D1(0.0, 0.0)
        out = sample_conditional(p, x1, y, 1.0, np.random.default_rng(11))
        np.testing.assert_array_equal(out, x1)

    def test_moments_at_midpoint(self):
        p = PathSpec(DENOISE, sigma=0.487)
        x1, y = D1(1.0, -1.0), D1(0.2, 0.4)
        rng = np.random.default_rng(4)
        draws = np.stack([sample_conditional(p, x1, y, 0.5, rng) for _ in range(100_000)])
        mu, sig, _, _ = path_coeffs(p, x1, y, 0.5)
        np.testing.assert_allclose(draws.mean(axis=0), mu, atol=4 * sig / np.sqrt(100_000))
        np.testing.assert_allclose(draws.var(axis=0), sig**2, rtol=0.05)

    def test_matches_flow_pushforward_in_law(self):
        """x_t sampled directly agrees in first and second moments with the
        flow applied to x0 ~ N(mu_0, sigma_0^2 I)."""
        p = PathSpec(DENOISE, sigma=0.6)
        x1, y = D1(1.5), D1(-0.5)
        rng = np.random.default_rng(5)
        t = 0.5
        direct = np.stack([sample_conditional(p, x1, y, t, rng) for _ in range(100_000)])
        mu0, s0, _, _ = path_coeffs(p, x1, y, 0.0)
        x0 = mu0 + s0 * rng.standard_normal((100_000, 1))
        pushed = cond_flow(p, x0, x1, y, t)
        assert direct.mean() == pytest.approx(pushed.mean(), abs=4 * s0 / np.sqrt(100_000))
        assert direct.var() == pytest.approx(pushed.var(), rel=0.05)

    def test_deterministic_given_seed(self):
        p = PathSpec(DENOISE, sigma=0.5)
        a = sample_conditional(p, D1(1.0), D1(0.0), 0.3, np.random.default_rng(42))
        b = sample_conditional(p, D1(1.0), D1(0.0), 0.3, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)


class TestCondScore:
    def test_zero_at_mean(self):
        p = PathSpec(DENOISE, sigma=0.5)
        x1, y = D1(1.0, 2.0), D1(0.0, 0.0)
        mu, _, _, _ = path_coeffs(p, x1, y, 0.4)
        np.testing.assert_array_equal(cond_score(p, mu, x1, y, 0.4), np.zeros(2))

    def test_value(self):
        p = PathSpec(DENOISE, sigma=0.487)
        s = cond_score(p, D1(0.6), D1(1.0), D1(0.0), 0.5)
        assert s[0] == pytest.approx(-0.1 / 0.2435**2)

    def test_linearity_in_deviation(self):
        p = PathSpec(DENOISE, sigma=0.487)
        x1, y = D1(1.0), D1(0.0)
        mu, _, _, _ = path_coeffs(p, x1, y, 0.5)
        s1 = cond_score(p, mu + 0.1, x1, y, 0.5)
        s2 = cond_score(p, mu + 0.2, x1, y, 0.5)
        np.testing.assert_allclose(s2, 2.0 * s1, rtol=1e-12)

    def test_score_field_link(self):
        """v(x) - v(mu_t) = -sigma_t * sigma'_t * score(x), exactly."""
        rng = np.random.default_rng(6)
        p = PathSpec(DENOISE, sigma=0.487)
        for _ in range(10):
            x1, y, x = rng.standard_normal((3, 4))
            t = rng.uniform(0.0, 0.95)
            mu, sig, _, sig_dot = path_coeffs(p, x1, y, t)
            lhs = cond_vector_field(p, x, x1, y, t) - cond_vector_field(p, mu, x1, y, t)
            rhs = -sig * sig_dot * cond_score(p, x, x1, y, t)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestMarginalFieldOracle:
    def test_t0_reduces_to_prior_mean_field(self):
        p = PathSpec(DENOISE, sigma=0.487)
        tgt = GaussianTarget(D1(1.0, -2.0), 0.5)
        x, y = D1(0.3, 0.1), D1(0.0, 0.0)
        got = marginal_field_oracle(p, tgt, x, y, 0.0)
        want = (tgt.mean - y) - (x - y)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_point_mass_limit_is_conditional_field(self):
        p = PathSpec(DENOISE, sigma=0.487)
        m = D1(1.2, 0.8)
        tgt = GaussianTarget(m, 1e-12)
        x, y = D1(0.5, -0.5), D1(0.0, 0.0)
        got = marginal_field_oracle(p, tgt, x, y, 0.6)
        np.testing.assert_allclose(got, cond_vector_field(p, x, m, y, 0.6), atol=1e-9)

    def test_matches_brute_force_posterior_average(self):
        """The oracle equals the Monte-Carlo posterior average of the
        conditional field over x1 | x_t for 20 random configurations."""
        rng = np.random.default_rng(7)
        n = 100_000
        for _ in range(20):
            sigma = rng.uniform(0.2, 0.8)
            gamma = rng.uniform(0.2, 0.8)
            p = PathSpec(DENOISE, sigma=sigma)
            m = rng.standard_normal(3)
            tgt = GaussianTarget(m, gamma)
            y = rng.standard_normal(3)
            x = rng.standard_normal(3)
            t = rng.uniform(0.1, 0.9)
            # posterior of x1 given x_t = x is Gaussian with closed-form moments
            x1_hat = posterior_mean(p, tgt, x, y, t)
            var = t**2 * gamma**2 + (1 - t) ** 2 * sigma**2
            post_std = np.sqrt(gamma**2 * (1 - t) ** 2 * sigma**2 / var)
            draws = x1_hat + post_std * rng.standard_normal((n, 3))
            # brute-force conditional field per draw, vectorized over x1
            fields = (draws - y) - (x - (t * draws + (1 - t) * y)) / (1 - t)
            np.testing.assert_allclose(fields[0], cond_vector_field(p, x, draws[0], y, t))
            mc = fields.mean(axis=0)
            se = fields.std(axis=0) / np.sqrt(n)
            got = marginal_field_oracle(p, tgt, x, y, t)
            np.testing.assert_allclose(got, mc, atol=np.maximum(5 * se, 1e-12))

    def test_marginal_moments(self):
        p = PathSpec(DENOISE, sigma=0.4)
        tgt = GaussianTarget(D1(2.0), 0.3)
        mean, std = marginal_moments(p, tgt, D1(1.0), 0.25)
        assert mean[0] == pytest.approx(0.25 * 2.0 + 0.75 * 1.0)
        assert std == pytest.approx(np.sqrt(0.25**2 * 0.09 + 0.75**2 * 0.16))
