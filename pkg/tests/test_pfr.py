import numpy as np
import pytest

from vppflex import pfr

from conftest import box_unit, toy_model


@pytest.fixture(scope="module")
def surface(desk4):
    return pfr.build_surface(desk4, 0)


def box_fleet_model(load=0.05):
    return toy_model([box_unit("C1", "CHP", -0.2, 0.2, -0.1, 0.1)], load=(load,))


def test_zero_angle_keeps_anchor_q(desk4):
    pts = pfr.sweep_pfr(desk4, 1, 0.9, n_angles=8)
    anchor = pfr.find_anchor(desk4, 1, 0.9)
    assert pts[0].phi == 0.0
    assert pts[0].q == pytest.approx(anchor[1], abs=1e-9)
    assert pts[0].p > anchor[0]


def test_one_bus_region_is_translated_chart():
    model = box_fleet_model(0.05)
    pts = pfr.sweep_pfr(model, 0, None, n_angles=16)
    # the chart box shifted by the load: P in [-0.25, 0.15], Q in [-0.1, 0.1]
    for p in pts:
        on_p = min(abs(p.p + 0.25), abs(p.p - 0.15)) < 1e-9
        on_q = min(abs(p.q + 0.1), abs(p.q - 0.1)) < 1e-9
        assert on_p or on_q
        assert -0.25 - 1e-9 <= p.p <= 0.15 + 1e-9 and -0.1 - 1e-9 <= p.q <= 0.1 + 1e-9


def test_zero_uncertainty_levels_coincide(desk4):
    det = desk4.deterministic()
    levels = pfr.sweep_levels(det, 0, [0.6, 0.8, 0.95], n_angles=12)
    for a, b in zip(levels[0.6], levels[0.95]):
        assert (a.p, a.q) == pytest.approx((b.p, b.q), abs=1e-9)


def test_ray_radii_nested_in_confidence(desk4):
    gammas = [0.6, 0.75, 0.9, 0.95]
    levels = pfr.sweep_levels(desk4, 2, gammas, n_angles=16)
    r = np.array([[p.r for p in levels[g]] for g in gammas])
    assert np.all(np.diff(r, axis=0) <= 1e-9)


def test_sweep_rejects_bad_inputs(desk4):
    with pytest.raises(ValueError):
        pfr.sweep_levels(desk4, 0, [0.9], n_angles=4)
    with pytest.raises(ValueError):
        pfr.sweep_levels(desk4, 0, [1.2])


def test_polygon_has_one_row_per_piece(surface):
    poly = pfr.polygon_at(surface, 0.8)
    assert poly.A.shape == (16, 2) and poly.b.shape == (16,)
    assert not poly.empty


def test_polygon_area_nonincreasing(surface):
    areas = [pfr.polygon_at(surface, g).area for g in pfr.DEFAULT_GAMMAS]
    assert np.all(np.diff(areas) <= 0)


def test_polygons_nested(surface):
    inner = pfr.polygon_at(surface, 0.9)
    outer = pfr.polygon_at(surface, 0.7)
    v = inner.vertices
    assert len(v) >= 3 and np.all(outer.contains(v[:, 0], v[:, 1], tol=1e-9))


def test_conf_at_far_exterior_is_zero(surface):
    P0, Q0 = surface.anchor
    assert surface(P0 + 50.0, Q0) == 0.0
    assert surface(P0, Q0 - 50.0) == 0.0


def test_conf_at_anchor_near_top_level(surface):
    assert surface(*surface.anchor) >= max(g for g in surface.gammas if g < 0.99) - 0.05
    assert surface(*surface.anchor) <= 1.0


def test_training_points_mostly_within_two_rmse(surface):
    X, y = surface.scatter()
    n = len(surface.points)
    err = np.abs(surface(X[:n, 0], X[:n, 1]) - y[:n])
    assert np.mean(err <= 2 * surface.rmse) >= 0.95
    assert surface.r2 >= 0.95


def test_unachievable_level_reported_as_empty(surface):
    peak = pfr.surface_peak(surface)
    poly = pfr.polygon_at(surface, min(peak + 1e-3, 0.999))
    assert poly.empty and poly.area == 0.0


def test_polygon_dict_fields(surface):
    d = pfr.polygon_at(surface, 0.8).to_dict()
    assert set(d) == {"gamma", "t", "empty", "A", "b"}
