import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppflex import costagg
from vppflex.costagg import CostRangeError, DerCostModel
from vppflex.derfleet import EssRecord

from conftest import box_unit, toy_model


def chp_model(cost, load=0.1, p_max=0.3):
    return toy_model([box_unit("C1", "CHP", 0.0, p_max, cost=cost)], load=(load,))


def test_zero_cost_fleet_gives_zero_curve():
    model = chp_model(DerCostModel())
    pts = costagg.sample_cost_points(model, None, 0, n_samples=11)
    assert np.all(pts[:, 1] == 0.0)
    curve = costagg.fit_cost_curve(pts, m=5)
    assert np.allclose(curve(pts[:, 0]), 0.0, atol=1e-12)


def test_linear_chp_cost_exact():
    model = chp_model(DerCostModel(b=2.0, c=0.1))
    pts = costagg.sample_cost_points(model, None, 0, n_samples=9)
    # P_PCC = P_chp - load
    assert np.allclose(pts[:, 1], 2.0 * (pts[:, 0] + 0.1) + 0.1, atol=1e-9)


def test_quadratic_chp_within_secant_bound():
    cost = DerCostModel(a=3.0, b=0.5)
    model = chp_model(cost)
    pts = costagg.sample_cost_points(model, None, 0, n_samples=21, segments=10)
    exact = cost.generator(pts[:, 0] + 0.1)
    width = 0.3 / 10
    assert np.all(pts[:, 1] >= exact - 1e-9)
    assert np.all(pts[:, 1] - exact <= 3.0 * width**2 / 4 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(-2.0, 2.0), st.integers(1, 12))
def test_secant_lines_interpolate_parabola(a, b, segments):
    cost = DerCostModel(a=a, b=b, c=0.2)
    s, c = costagg.secant_lines(cost, -0.4, 0.6, segments)
    p = np.linspace(-0.4, 0.6, 101)
    pwl = np.max(np.outer(p, s) + c, axis=1)
    gap = pwl - cost.generator(p)
    assert np.all(gap >= -1e-12)
    assert np.all(gap <= a * (1.0 / segments) ** 2 / 4 + 1e-12)


def test_fit_five_pieces_high_r2_and_convex(desk4):
    pts = costagg.sample_cost_points(desk4, 0.9, 1)
    curve = costagg.fit_cost_curve(pts, m=5)
    assert curve.r2 >= 0.99
    p = np.linspace(curve.p_min, curve.p_max, 201)
    assert np.all(np.diff(curve(p), 2) >= -1e-9)


def test_range_error_outside_validity(desk4):
    pts = costagg.sample_cost_points(desk4, 0.9, 0, n_samples=11)
    curve = costagg.fit_cost_curve(pts, m=3)
    with pytest.raises(CostRangeError):
        curve(curve.p_max + 0.01)
    with pytest.raises(CostRangeError):
        curve(curve.p_min - 0.01)
    assert np.isfinite(curve(curve.p_max))


def test_generation_fleet_cost_nondecreasing():
    model = chp_model(DerCostModel(a=1.0, b=1.0))
    pts = costagg.sample_cost_points(model, None, 0, n_samples=15)
    assert np.all(np.diff(pts[:, 1]) >= -1e-12)


def test_storage_cost_nonnegative():
    unit = box_unit("E1", "ESS", -0.5, 0.5, ess=EssRecord(1.0, 0.0, 1.0, 0.5), cost=DerCostModel(k_ch=0.2, k_dis=0.3))
    model = toy_model([unit], load=(0.0,))
    pts = costagg.sample_cost_points(model, None, 0, n_samples=11)
    assert np.all(pts[:, 1] >= 0)
    # |P| priced at the rate of the direction of flow
    assert np.allclose(pts[:, 1], np.where(pts[:, 0] > 0, 0.3 * pts[:, 0], -0.2 * pts[:, 0]), atol=1e-9)


def test_invalid_cost_models_rejected():
    with pytest.raises(ValueError):
        DerCostModel(a=-1.0)
    with pytest.raises(ValueError):
        DerCostModel(k_ch=-0.1)


def test_too_few_samples_for_pieces():
    with pytest.raises(ValueError):
        costagg.fit_cost_curve(np.zeros((3, 2)), m=5)
