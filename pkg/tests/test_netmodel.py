import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppflex import ccopf, netmodel
from vppflex.netmodel import NetworkError, linearize, solve_load_flow


def two_bus(z=0.01 + 0.1j):
    return netmodel.network_from_dict({
        "pcc": "0",
        "buses": [{"id": "0", "phases": "a"}, {"id": "1", "phases": "a"}],
        "branches": [{"from": "0", "to": "1", "phases": "a", "z_real": [[z.real]], "z_imag": [[z.imag]],
                      "i_max": 1.0}],
    })


def closed_form_v(z, p_load, q_load):
    """|V2| of a 2-bus line with |V1| = 1 from the real quadratic in |V2|^2."""
    R, X = z.real, z.imag
    B = 2 * (R * p_load + X * q_load) - 1.0
    C = abs(z) ** 2 * (p_load**2 + q_load**2)
    return np.sqrt((-B + np.sqrt(B * B - 4 * C)) / 2)


def test_zero_injection_is_no_load_profile():
    net = two_bus()
    st_ = solve_load_flow(net, np.zeros(net.n_inj))
    assert np.allclose(st_.currents, 0.0, atol=1e-12)
    assert np.allclose(np.abs(st_.voltages), 1.0, atol=1e-12)


def test_two_bus_voltage_matches_quadratic():
    net = two_bus()
    x = net.injection_vector({("1", "a"): -(0.1 + 0.05j)})
    st_ = solve_load_flow(net, x)
    assert abs(st_.magnitudes()[1] - closed_form_v(0.01 + 0.1j, 0.1, 0.05)) < 1e-9


def test_kirchhoff_residual(desk4):
    net = desk4.network
    x = desk4.linmodel.x_base
    st_ = solve_load_flow(net, x)
    assert st_.residual <= 1e-9


def test_injection_on_absent_phase_rejected():
    net = two_bus()
    with pytest.raises(NetworkError):
        net.injection_vector({("1", "b"): 0.1})


def test_divergence_reports_residual():
    net = two_bus()
    x = net.injection_vector({("1", "a"): -5.0})
    with pytest.raises(netmodel.LoadFlowDivergence) as exc:
        solve_load_flow(net, x, max_iter=20)
    assert exc.value.residual > 0


def test_invalid_networks_rejected():
    with pytest.raises(NetworkError):
        netmodel.network_from_dict({"pcc": "0", "buses": [{"id": "0"}, {"id": "1"}], "branches": []})
    with pytest.raises(NetworkError):
        netmodel.Bus("1", ("a",), v_min=1.1, v_max=1.0)


@pytest.mark.parametrize("method", ["jacobian", "fixed-point"])
def test_linear_model_exact_at_base(desk4, method):
    net = desk4.network
    x0 = desk4.linmodel.x_base
    lm = linearize(net, x0, method=method)
    V, _, P, Q = lm.eval_state(x0)
    st_ = solve_load_flow(net, x0)
    assert np.allclose(V, st_.magnitudes(), atol=1e-12)
    assert P == pytest.approx(st_.export.real, abs=1e-12)
    assert Q == pytest.approx(st_.export.imag, abs=1e-12)


def test_sensitivity_matches_finite_difference():
    net = two_bus()
    x0 = net.injection_vector({("1", "a"): -(0.1 + 0.05j)})
    lm = linearize(net, x0)
    k = net.injection_labels().index("p:1.a")
    h = 1e-5
    dx = np.zeros_like(x0)
    dx[k] = h
    fd = (solve_load_flow(net, x0 + dx).magnitudes()[1] - solve_load_flow(net, x0 - dx).magnitudes()[1]) / (2 * h)
    assert abs(lm.K[1, k] - fd) < 1e-4


def test_eval_state_at_zero_gives_offsets(desk4):
    lm = desk4.linmodel
    V, I, P, Q = lm.eval_state(np.zeros(len(lm.labels)))
    assert np.array_equal(V, lm.b) and np.array_equal(I, lm.d)
    assert P == lm.g_const and Q == lm.l


def test_eval_state_matches_dense_matvec(desk4):
    lm = desk4.linmodel
    x = np.random.default_rng(3).normal(0, 0.1, len(lm.labels))
    V = lm.eval_state(x)[0]
    oracle = np.array([sum(lm.K[i, j] * x[j] for j in range(len(x))) + lm.b[i] for i in range(len(lm.b))])
    assert np.allclose(V, oracle, atol=1e-13)


def test_eval_state_dimension_checked(desk4):
    with pytest.raises(NetworkError):
        desk4.linmodel.eval_state(np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_affine_consistency(desk4, lam, seed):
    lm = desk4.linmodel
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(0, 0.2, (2, len(lm.labels)))
    mix = lm.eval_state(lam * x1 + (1 - lam) * x2)
    a, b = lm.eval_state(x1), lm.eval_state(x2)
    for k in range(4):
        assert np.allclose(mix[k], lam * np.asarray(a[k]) + (1 - lam) * np.asarray(b[k]), atol=1e-12)


def test_perturbation_accuracy_on_desk(desk4):
    net, lm = desk4.network, desk4.linmodel
    rng = np.random.default_rng(0)
    xs = lm.x_base * (1 + rng.uniform(-0.2, 0.2, (50, len(lm.x_base))))
    assert netmodel.voltage_error(lm, net, xs).max() <= 0.006


@pytest.mark.parametrize("name", ["desk4", "bus2", "bus1"])
def test_accuracy_over_reachable_box(request, name):
    model = request.getfixturevalue(name)
    assert ccopf.linearization_error(model, n_samples=32, seed=1) <= 0.006


def test_voltage_error_zero_at_base(desk4):
    lm = desk4.linmodel
    assert netmodel.voltage_error(lm, desk4.network, lm.x_base)[0] < 1e-12
