import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppflex.cpwl import PwlModel, fit_cpwl, fit_stats


def grid(n=21, lo=-1.0, hi=1.0):
    u = np.linspace(lo, hi, n)
    return np.array([(a, b) for a in u for b in u])


def regular_pieces(m, rng):
    ang = 2 * np.pi * (np.arange(m) + rng.uniform(0, 0.3, m)) / m
    slopes = np.c_[np.cos(ang), np.sin(ang)] * rng.uniform(1.0, 2.0, (m, 1))
    return slopes, rng.uniform(-0.2, 0.2, m)


def brute_force(slopes, intercepts, X, mode):
    vals = [[s @ x + c for s, c in zip(slopes, intercepts)] for x in X]
    return np.array([min(v) if mode == "min" else max(v) for v in vals])


@pytest.mark.parametrize("m,mode", [(3, "min"), (5, "max")])
def test_recovers_generating_function(m, mode):
    slopes, icpt = regular_pieces(m, np.random.default_rng(m))
    X = grid()
    y = brute_force(slopes, icpt, X, mode)
    model = fit_cpwl(X, y, m, mode=mode, restarts=10, seed=0)
    assert model.report.sse <= 1e-10
    assert model.m == m


def test_single_piece_is_least_squares_plane():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (200, 2))
    y = X @ [0.7, -0.3] + 0.2 + rng.normal(0, 0.1, 200)
    model = fit_cpwl(X, y, 1, polish=False)
    coef = np.linalg.lstsq(np.c_[X, np.ones(200)], y, rcond=None)[0]
    assert np.allclose(np.r_[model.slopes[0], model.intercepts], coef, atol=1e-6)


def test_plane_with_more_pieces_still_exact():
    X = grid(11)
    y = X @ [0.5, 0.25] - 0.1
    model = fit_cpwl(X, y, 3, mode="min", restarts=3)
    assert model.report.sse <= 1e-12
    assert np.allclose(model(X), y, atol=1e-7)


def test_clamped_min_model_is_nonnegative():
    model = PwlModel(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0.5, 0.5]), "min", clamp=True)
    X = np.array([[0.0, 0.0], [2.0, 0.0], [-3.0, 1.0]])
    assert np.allclose(model(X), [0.5, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["min", "max"]))
def test_evaluation_matches_brute_force(seed, mode):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 6))
    s, c = rng.normal(size=(m, 2)), rng.normal(size=m)
    X = rng.normal(size=(30, 2))
    assert np.allclose(PwlModel(s, c, mode)(X), brute_force(s, c, X, mode), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_min_model_concave_max_model_convex(seed, lam):
    rng = np.random.default_rng(seed)
    s, c = rng.normal(size=(4, 2)), rng.normal(size=4)
    x1, x2 = rng.normal(size=(2, 2))
    mid = lam * x1 + (1 - lam) * x2
    f = PwlModel(s, c, "max")
    g = PwlModel(s, c, "min")
    assert f(mid) <= lam * f(x1) + (1 - lam) * f(x2) + 1e-12
    assert g(mid) >= lam * g(x1) + (1 - lam) * g(x2) - 1e-12


def test_report_statistics_match_definitions():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, (150, 2))
    y = np.abs(X).sum(axis=1) + rng.normal(0, 0.05, 150)
    model = fit_cpwl(X, y, 4, mode="max", restarts=4)
    r = y - model(X)
    assert model.report.sse == pytest.approx(r @ r, rel=1e-12)
    assert model.report.rmse == pytest.approx(np.sqrt(r @ r / 150), rel=1e-12)
    assert model.report.r2 == pytest.approx(1 - r @ r / np.sum((y - y.mean()) ** 2), rel=1e-12)
    assert fit_stats(y, y) == (0.0, 0.0, 1.0)


def test_deterministic_for_fixed_seed():
    X = grid(9)
    y = np.abs(X).max(axis=1)
    a = fit_cpwl(X, y, 4, restarts=3, seed=7)
    b = fit_cpwl(X, y, 4, restarts=3, seed=7)
    assert np.array_equal(a.slopes, b.slopes) and np.array_equal(a.intercepts, b.intercepts)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        fit_cpwl(np.zeros((5, 2)), np.zeros(5), 3)
    with pytest.raises(ValueError):
        PwlModel(np.ones((2, 2)), np.ones(3))


def test_model_dict_round_trip():
    m = PwlModel(np.array([[1.0, 2.0]]), np.array([0.5]), "min", True)
    back = PwlModel.from_dict(m.to_dict())
    assert np.array_equal(back.slopes, m.slopes) and np.array_equal(back.intercepts, m.intercepts)
    assert (back.mode, back.clamp) == (m.mode, m.clamp)


def test_hinge_exterior_keeps_floor_points_below_zero():
    # cone of height 1 clamped at zero outside the unit disc
    X = grid(25, -1.5, 1.5)
    ang = 2 * np.pi * np.arange(6) / 6
    s = -np.c_[np.cos(ang), np.sin(ang)]
    y = np.maximum(brute_force(s, np.ones(6), X, "min"), 0.0)
    model = fit_cpwl(X, y, 6, mode="min", clamp=True, exterior="hinge", restarts=5,
                     center=np.zeros(2))
    assert model.report.sse <= 1e-8
