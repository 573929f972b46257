import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fmqmc.targets import (
    GmmSpec,
    UnsupportedTargetError,
    get_target,
    make_banana,
    make_gmm2d,
    make_gmm30d,
    make_logistic,
    sample,
)

# mixture as displayed: Sigma_1 scaled by 1/40^2, the rest by 1/4^2
REF_MEANS = [(1.0, 1.0), (2.0, 3.6), (3.3, 2.8), (1.1, 2.9)]
REF_COVS = [
    np.array([[2.0, 0.6], [0.6, 1.0]]) / 1600,
    np.array([[2.0, -0.4], [-0.4, 2.0]]) / 16,
    np.array([[3.0, 0.8], [0.8, 2.0]]) / 16,
    np.array([[3.0, 0.0], [0.0, 0.5]]) / 16,
]


def gmm2d_reference_pdf(x):
    return sum(0.25 * stats.multivariate_normal(m, c).pdf(x) for m, c in zip(REF_MEANS, REF_COVS))


def banana_reference_pdf(x1, x2, a=0.3, b=1 / np.sqrt(2), c=-1.0):
    return stats.norm.pdf(x1) * stats.norm.pdf((x2 - a * x1**2 - c) / b) / abs(b)


def grid_integral(target, lo, hi, n):
    g1 = np.linspace(lo[0], hi[0], n)
    g2 = np.linspace(lo[1], hi[1], n)
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    vals = target.pdf(np.column_stack([X1.ravel(), X2.ravel()])).reshape(n, n)
    return np.trapezoid(np.trapezoid(vals, g2, axis=1), g1)


def clt_check(target, n=10**6, seed=0):
    x = sample(target, n, seed)
    m1, m2 = target.moments()
    se1 = x.std(axis=0, ddof=1) / np.sqrt(n)
    se2 = (x**2).std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0) - m1) <= 4 * se1)
    assert np.all(np.abs((x**2).mean(axis=0) - m2) <= 4 * se2)
    return x


class TestGmm2d:
    def test_moments(self):
        m1, m2 = make_gmm2d().moments()
        np.testing.assert_allclose(m1, [1.85, 2.575], rtol=1e-15)
        assert m2[0] == pytest.approx(4.4003125, rel=1e-15)
        assert m2[1] == pytest.approx(0.25 * (1 + 3.6**2 + 2.8**2 + 2.9**2 + (1 / 1600 + (2 + 2 + 0.5) / 16)),
                                      rel=1e-15)

    def test_density_matches_independent_mixture(self):
        x = np.random.default_rng(0).normal(size=(200, 2)) * 1.5 + [2.0, 2.5]
        np.testing.assert_allclose(make_gmm2d().pdf(x), gmm2d_reference_pdf(x), rtol=1e-12)

    def test_mixture_lower_bound_at_mean(self):
        t = make_gmm2d()
        peak = stats.multivariate_normal(REF_MEANS[1], REF_COVS[1]).logpdf(REF_MEANS[1])
        assert t.log_pdf(np.array(REF_MEANS[1])) >= peak - np.log(4)

    def test_sigma1_switch(self):
        t = make_gmm2d(sigma1_scale=1 / 16)
        assert t.moments()[1][0] == pytest.approx((17.1 + 2 / 16 + 8 / 16) / 4, rel=1e-15)

    def test_normalization(self):
        assert grid_integral(make_gmm2d(), (-8, -8), (8, 8), 3201) == pytest.approx(1.0, abs=1e-3)

    def test_sampler_consistency(self):
        clt_check(make_gmm2d())


class TestGmm30d:
    def test_moments(self):
        m1, m2 = make_gmm30d().moments()
        np.testing.assert_array_equal(m1, 0.0)
        np.testing.assert_allclose(m2[:2], 4.5, rtol=1e-15)
        np.testing.assert_allclose(m2[2:], 0.5, rtol=1e-15)

    def test_sign_symmetry(self):
        t = make_gmm30d()
        x = np.random.default_rng(1).normal(size=(50, 30)) * 2
        y = x.copy()
        y[:, :2] *= -1
        np.testing.assert_allclose(t.log_pdf(x), t.log_pdf(y), rtol=1e-13)

    def test_density_matches_independent_mixture(self):
        t = make_gmm30d()
        x = np.random.default_rng(2).normal(size=(20, 30)) * 1.5
        means = [np.r_[s1, s2, np.zeros(28)] for s1 in (-2, 2) for s2 in (-2, 2)]
        ref = np.log(sum(0.25 * stats.multivariate_normal(m, 0.5 * np.eye(30)).pdf(x) for m in means))
        np.testing.assert_allclose(t.log_pdf(x), ref, rtol=1e-12)

    def test_sampler_consistency_and_coordinate_variance(self):
        n = 10**6
        x = clt_check(make_gmm30d(), n=n, seed=3)
        v = x[:, 4].var(ddof=1)
        # Var of a sample variance for a Gaussian coordinate: 2 sigma^4 / (n - 1)
        assert abs(v - 0.5) <= 4 * np.sqrt(2 * 0.25 / (n - 1))


class TestBanana:
    def test_density_value(self):
        assert make_banana().pdf(np.array([0.0, -1.0])) == pytest.approx(np.sqrt(2) / (2 * np.pi), rel=1e-14)
        assert np.sqrt(2) / (2 * np.pi) == pytest.approx(0.2250791, abs=1e-7)

    def test_density_matches_closed_form(self):
        x = np.random.default_rng(4).normal(size=(100, 2)) * 2
        np.testing.assert_allclose(make_banana().pdf(x), banana_reference_pdf(x[:, 0], x[:, 1]), rtol=1e-12)

    def test_moments(self):
        m1, m2 = make_banana().moments()
        np.testing.assert_allclose(m1, [0.0, -0.7], atol=1e-15)
        np.testing.assert_allclose(m2, [1.0, 1.17], rtol=1e-14)

    def test_even_in_first_coordinate(self):
        t = make_banana()
        x = np.random.default_rng(5).normal(size=(50, 2)) * 3
        np.testing.assert_array_equal(t.log_pdf(x), t.log_pdf(x * [-1, 1]))

    def test_normalization(self):
        assert grid_integral(make_banana(), (-5, -4), (5, 6), 1001) == pytest.approx(1.0, abs=1e-3)

    def test_sample_mean_band(self):
        clt_check(make_banana(), seed=6)


class TestSampling:
    @pytest.mark.parametrize("name", ["gmm2d", "gmm30d", "banana"])
    def test_seeded(self, name):
        t = get_target(name)
        np.testing.assert_array_equal(sample(t, 100, 9), sample(t, 100, 9))
        assert not np.array_equal(sample(t, 100, 9), sample(t, 100, 10))
        assert sample(t, 7, 0).shape == (7, t.d)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            sample(make_banana(), 0, 1)

    def test_unknown_target(self):
        with pytest.raises(UnsupportedTargetError):
            get_target("funnel")

    def test_logistic_reference_target(self):
        t = make_logistic(1)
        x = np.linspace(-30, 30, 13)[:, None]
        np.testing.assert_allclose(t.log_pdf(x), stats.logistic.logpdf(x[:, 0]), rtol=1e-13)
        assert t.moments()[1][0] == pytest.approx(np.pi**2 / 3)
        assert t.tail_rate == 1.0

    def test_tail_tags(self):
        for name in ("gmm2d", "gmm30d", "banana"):
            assert get_target(name).tail_rate == np.inf


class TestGmmSpec:
    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            GmmSpec(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(ValueError):
            GmmSpec(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))


@settings(max_examples=30, deadline=None)
@given(name=st.sampled_from(["gmm2d", "gmm30d", "banana"]), scale=st.floats(1.0, 1e3), seed=st.integers(0, 10**6))
def test_log_pdf_finite_far_out(name, scale, seed):
    t = get_target(name)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(4, t.d))
    x /= np.max(np.abs(x), axis=1, keepdims=True)
    lp = t.log_pdf(x * scale)
    assert np.all(np.isfinite(lp)) and np.all(lp < 10)
