import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppflex import uncert
from vppflex.uncert import Gmm, GmmError, UnivariateGmm, cdf, pdf, project, quantile

from conftest import random_gmm


def erf_cdf(x, mu=0.0, sigma=1.0):
    return 0.5 * (1.0 + math.erf((x - mu) / (sigma * math.sqrt(2.0))))


def bisect_inverse(f, alpha, lo=-50.0, hi=50.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_single_component_fit_is_sample_moments():
    X = np.random.default_rng(0).normal(size=(400, 3)) @ np.array([[1, 0, 0], [0.5, 1, 0], [0, 0.3, 2]])
    g = uncert.fit_em(X, 1)
    assert np.allclose(g.means[0], X.mean(axis=0), atol=1e-14)
    assert np.allclose(g.covs[0], np.cov(X, rowvar=False, bias=True), atol=1e-14)


def test_single_gaussian_recovered_within_standard_errors():
    rng = np.random.default_rng(1)
    mu = np.array([0.5, -1.0])
    C = np.array([[1.0, 0.3], [0.3, 0.5]])
    N = 4000
    X = rng.multivariate_normal(mu, C, N)
    g = uncert.fit_em(X, 1)
    se = np.sqrt(np.diag(C) / N)
    assert np.all(np.abs(g.means[0] - mu) <= 3 * se)
    # variance standard error sqrt(2/N) * sigma^2
    assert np.all(np.abs(np.diag(g.covs[0]) - np.diag(C)) <= 3 * np.sqrt(2 / N) * np.diag(C))


def test_two_clusters_equal_weights():
    rng = np.random.default_rng(2)
    X = np.r_[rng.normal(-5, 1, (500, 1)), rng.normal(5, 1, (500, 1))]
    g = uncert.fit_em(X, 2, seed=3)
    assert np.allclose(np.sort(g.weights), [0.5, 0.5], atol=0.05)
    assert np.allclose(np.sort(g.means.ravel()), [-5, 5], atol=0.2)


def test_em_loglik_nondecreasing():
    rng = np.random.default_rng(4)
    X = np.r_[rng.normal(-1, 0.5, (300, 2)), rng.normal(1.5, 1.0, (300, 2))]
    g = uncert.fit_em(X, 3, seed=0)
    tr = np.array(g.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-10 * np.abs(tr[:-1]).max())


def test_too_few_samples_rejected():
    with pytest.raises(GmmError):
        uncert.fit_em(np.zeros((5, 2)), 1)


def test_bic_selects_two_components():
    rng = np.random.default_rng(6)
    X = np.r_[rng.normal(-4, 1, (400, 1)), rng.normal(4, 1, (400, 1))]
    assert uncert.fit_auto(X, 4).n_components == 2


def test_invalid_gmm_rejected():
    with pytest.raises(GmmError):
        Gmm(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(GmmError):
        Gmm(np.ones(1), np.zeros((1, 2)), np.array([[[1.0, 0], [0, -1.0]]]))


def test_zero_projection_is_point_mass():
    g = random_gmm(np.random.default_rng(0), 3)
    u = project(g, np.zeros(3))
    assert np.all(u.sigmas == 0) and np.all(u.means == 0)
    assert quantile(u, 0.3) == 0.0


def test_unit_projection_is_marginal():
    g = random_gmm(np.random.default_rng(1), 3)
    u = project(g, np.array([0.0, 1.0, 0.0]))
    assert np.allclose(u.means, g.means[:, 1])
    assert np.allclose(u.sigmas, np.sqrt(g.covs[:, 1, 1]))


def test_projection_matches_empirical_cdf():
    g = random_gmm(np.random.default_rng(2), 4)
    a = np.array([0.3, -1.2, 0.5, 2.0])
    u = project(g, a)
    s = np.sort(uncert.sample(g, 100_000, seed=9) @ a)
    F = cdf(u, s)
    emp = np.arange(1, s.size + 1) / s.size
    assert np.max(np.abs(F - emp)) < 0.02


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_projection_cdf_matches_independent_formula(seed, x):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng, 3)
    a = rng.normal(size=3)
    means = [float(a @ m) for m in g.means]
    sig = [math.sqrt(float(a @ c @ a)) for c in g.covs]
    oracle = sum(w * erf_cdf(x, m, s) for w, m, s in zip(g.weights, means, sig))
    assert abs(cdf(project(g, a), x) - oracle) <= 1e-12


def test_cdf_limits_and_symmetry():
    u = UnivariateGmm([0.5, 0.5], [-1, 1], [0.7, 0.7])
    assert cdf(u, -1e6) == 0.0 and cdf(u, 1e6) == 1.0
    assert cdf(u, 0.0) == pytest.approx(0.5, abs=1e-15)
    assert quantile(u, 0.5) == pytest.approx(0.0, abs=1e-9)


def test_standard_normal_cdf_value():
    u = UnivariateGmm([1.0], [0.0], [1.0])
    assert abs(cdf(u, 1.95996) - 0.975) < 1e-6
    assert abs(cdf(u, 1.95996) - erf_cdf(1.95996)) < 1e-14


def test_gaussian_quantile_095():
    mu, sigma = 0.3, 2.0
    u = UnivariateGmm([1.0], [mu], [sigma])
    z95 = bisect_inverse(erf_cdf, 0.95)
    assert z95 == pytest.approx(1.6449, abs=1e-4)
    assert quantile(u, 0.95) == pytest.approx(mu + sigma * z95, abs=1e-8)


def test_pdf_nonnegative_and_integrates():
    u = UnivariateGmm([0.2, 0.8], [-1, 2], [0.3, 1.5])
    x = np.linspace(-10, 12, 20001)
    f = pdf(u, x)
    assert np.all(f >= 0)
    assert np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(x)) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantile_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    u = UnivariateGmm(rng.dirichlet(np.ones(n)), rng.normal(0, 3, n), rng.uniform(0.05, 2, n))
    for alpha in (0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999):
        assert abs(cdf(u, quantile(u, alpha)) - alpha) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_quantile_inverts_cdf(seed, x):
    rng = np.random.default_rng(seed)
    u = UnivariateGmm(rng.dirichlet(np.ones(3)), rng.normal(0, 1, 3), rng.uniform(0.3, 1.5, 3))
    a = cdf(u, x)
    if 1e-6 < a < 1 - 1e-6:
        # the inverse is accurate in probability; in x the error scales with 1/pdf
        assert abs(quantile(u, a) - x) <= 1e-9 / pdf(u, x) + 1e-12


def test_quantile_on_atoms_is_infimum():
    u = UnivariateGmm([0.25, 0.75], [1.0, 3.0], [0.0, 0.0])
    assert quantile(u, 0.25) == 1.0
    assert quantile(u, 0.26) == 3.0


def test_quantile_rejects_bad_alpha():
    with pytest.raises(GmmError):
        quantile(UnivariateGmm([1.0], [0.0], [1.0]), 1.0)


def test_point_mass_sampling():
    g = Gmm(np.array([0.3, 0.7]), np.array([[1.0, 2.0], [-1.0, 0.0]]), np.zeros((2, 2, 2)))
    S = uncert.sample(g, 200, seed=0)
    rows = {tuple(r) for r in S}
    assert rows <= {(1.0, 2.0), (-1.0, 0.0)}


def test_sample_mean_clt():
    g = random_gmm(np.random.default_rng(7), 3)
    n = 50_000
    S = uncert.sample(g, n, seed=1)
    sd = np.sqrt(np.diag(g.covariance()))
    assert np.all(np.abs(S.mean(axis=0) - g.mean()) <= 4 * sd / np.sqrt(n))


def test_sampling_deterministic():
    g = random_gmm(np.random.default_rng(8), 2)
    assert np.array_equal(uncert.sample(g, 100, seed=5), uncert.sample(g, 100, seed=5))


def test_gmm_dict_round_trip():
    g = random_gmm(np.random.default_rng(9), 3)
    h = Gmm.from_dict(g.to_dict())
    assert np.array_equal(g.weights, h.weights) and np.array_equal(g.covs, h.covs)
