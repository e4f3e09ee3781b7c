import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vppflex import tcf
from vppflex.tcf import TcfEnvelope, envelope_from_power, shrink

from conftest import box_unit, ess_toy, toy_model


def test_shrink_identity_at_theta_one():
    env = envelope_from_power([0.0, -1.0], [1.0, 2.0], 1.0)
    out = shrink(env, 1.0)
    for k in tcf.FAMILIES:
        assert np.array_equal(out.pairs()[k][0], env.pairs()[k][0])
        assert np.array_equal(out.pairs()[k][1], env.pairs()[k][1])


def test_shrink_unit_interval():
    env = envelope_from_power([0.0], [1.0], 1.0)
    out = shrink(env, 0.9)
    assert out.p_min[0] == pytest.approx(0.1, abs=1e-15) and out.p_max[0] == pytest.approx(0.9, abs=1e-15)


def test_shrink_rejects_small_theta():
    env = envelope_from_power([0.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        shrink(env, 0.5)
    with pytest.raises(ValueError):
        tcf.robust_modify(ess_toy(), None, theta=1.0)


def test_shrink_only_selected_families():
    env = envelope_from_power([0.0, 0.0], [1.0, 1.0], 1.0)
    out = shrink(env, 0.9, families=("energy",))
    assert np.array_equal(out.p_max, env.p_max)
    assert np.allclose(out.e_max, 0.9 * env.e_max + 0.1 * env.e_min)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.51, 0.99))
def test_shrink_nests_and_keeps_midpoints(seed, theta):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-1, 0, 4)
    env = envelope_from_power(lo, lo + rng.uniform(0, 1, 4), 0.5)
    out = shrink(env, theta)
    assert out.within(env)
    for k in tcf.FAMILIES:
        a, b = env.pairs()[k], out.pairs()[k]
        assert np.allclose(a[0] + a[1], b[0] + b[1], atol=1e-12)


def test_inverted_envelope_rejected():
    with pytest.raises(ValueError):
        TcfEnvelope([1.0], [0.0], [], [], [0.0], [1.0], 1.0, None)


def test_halfspaces_membership():
    env = envelope_from_power([-1.0, -1.0], [1.0, 1.0], 1.0)
    assert env.contains([1.0, 1.0]) and not env.contains([1.0, 1.1])
    env2 = shrink(env, 0.8)
    assert env2.contains([0.6, 0.0]) and not env2.contains([0.7, 0.0])


def test_time_decoupled_fleet_converges_first_iteration():
    model = toy_model([box_unit("C1", "CHP", 0.0, 0.3)], load=(0.05, 0.1, 0.02))
    res = tcf.robust_modify(model, None)
    assert res.converged and res.iterations == 1
    assert res.violations[0] == pytest.approx(0.0, abs=1e-9)


def test_ess_toy_analytic_iteration_count():
    # feasible set: P1 in [-0.5, 0.5] and P1 + P2 in [-0.5, 0.5]
    # after k uniform shrinks the energy bound is 2 * 0.8**k, which must fall to 0.5
    k = int(np.ceil(np.log(0.25) / np.log(0.8)))
    assert k == 7
    res = tcf.robust_modify(ess_toy(), None, theta=0.9, eps=1e-4)
    assert res.converged and res.iterations == k + 1
    s = 0.8**k
    assert np.allclose(res.envelope.p_max, s, atol=1e-12)
    assert np.allclose(res.envelope.e_max, [s, 2 * s], atol=1e-12)
    # the violation before the last shrink is 2 * 0.8**(k-1) - 0.5
    assert res.violations[-2] == pytest.approx(2 * 0.8 ** (k - 1) - 0.5, abs=1e-9)


def test_single_period_inflated_bound_violation():
    model = toy_model([box_unit("C1", "CHP", 0.0, 0.3)], load=(0.1,))
    lo, hi = -0.1, 0.2
    for delta in (0.0, 0.05, 0.2):
        env = envelope_from_power([lo], [hi + delta], 1.0)
        v = tcf.max_violation(model, env)
        assert v.exact
        assert v.value == pytest.approx(delta, abs=1e-9)


def test_interior_slack_below_vertex_max():
    model = ess_toy(T=3)
    env = tcf.init_envelope(model, None)
    v = tcf.max_violation(model, env)
    inner = tcf.InnerProblem(model, None, 3)
    for P in tcf.random_trajectories(env, 30, seed=1):
        assert inner.solve(P)[0] <= v.value + 1e-9


def test_violation_monotone_and_envelopes_nested():
    res = tcf.robust_modify(ess_toy(T=3), None, theta=0.85)
    assert res.converged
    assert np.all(np.diff(res.violations) <= 1e-9)
    for a, b in zip(res.history, res.history[1:]):
        assert b.within(a)


def test_not_converged_status():
    res = tcf.robust_modify(ess_toy(), None, theta=0.99, max_iter=2)
    assert res.status == "NOT_CONVERGED"
    with pytest.raises(tcf.TcfNotConverged):
        res.require()


def test_disaggregation_tracks_trajectory():
    model = ess_toy(T=2)
    res = tcf.robust_modify(model, None)
    P = tcf.random_trajectories(res.envelope, 1, seed=3)[0]
    slack, X = tcf.disaggregate(model, res.envelope, P)
    assert slack <= 1e-6
    pr = [model.rows(t) for t in range(2)]
    realised = [pr[t].pcc_p @ X[t] + pr[t].pcc_p0 for t in range(2)]
    assert np.allclose(realised, P, atol=1e-7)


def test_envelope_dict_round_trip():
    env = envelope_from_power([0.0, 0.1], [0.5, 0.4], 0.5, gamma=0.9)
    back = TcfEnvelope.from_dict(env.to_dict())
    assert back.within(env, 0.0) and env.within(back, 0.0) and back.gamma == 0.9


def test_sampled_vertices_for_long_horizons():
    env = envelope_from_power(np.zeros(10), np.ones(10), 1.0)
    V, exact = tcf.envelope_vertices(env, n_dirs=50)
    assert not exact
    A, b = env.halfspaces()
    assert np.all(V @ A.T <= b + 1e-7)
