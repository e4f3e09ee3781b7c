"""Monte-Carlo ground truth for PQ confidence and per-row violation rates.

Each grid cell pins the PCC to ``(P, Q)`` and draws its own error scenarios.
A scenario is feasible when some dispatch meets the fleet rows and every
realised network and capability row.  The default solver resolves scenarios
in batches with exact certificates taken from one LP per batch:

* the LP maximises the smallest stochastic-row slack ``t`` for one
  scenario; its primal ``x`` proves feasible every scenario it satisfies;
* the optimal value ``V`` is concave in the right-hand side, and its dual
  ``y`` gives ``V(e') <= t* - y @ Ea (e' - e)``; a negative bound proves
  ``e'`` infeasible.

Scenarios left undecided get their own LP, so the result equals one
feasibility LP per scenario (``method='per-scenario'``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import uncert
from .ccopf import ChanceSpec, VppModel
from .jobs import map_jobs
from .lpcore import LinearProgram, LpStatus, solve_lp
from .netmodel import solve_load_flow, signed_currents

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class McGrid:
    p_axis: np.ndarray
    q_axis: np.ndarray
    confidence: np.ndarray  # (len(q_axis), len(p_axis))
    n_scenarios: int
    seed: int
    t: int = 0
    lp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        c = np.asarray(self.confidence, dtype=float)
        if c.shape != (len(self.q_axis), len(self.p_axis)):
            raise ValueError("confidence shape must be (len(q_axis), len(p_axis))")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("confidence entries must lie in [0, 1]")

    def mesh(self):
        return np.meshgrid(self.p_axis, self.q_axis)


def grid_axes(model: VppModel, t: int, n: int, margin: float = 0.1):
    """Axes covering the fleet-only PQ region with a relative margin."""
    from .pfr import find_anchor, sweep_pfr

    anchor = find_anchor(model, t, None)
    pts = sweep_pfr(model, t, None, 64, anchor)
    P = np.array([p.p for p in pts])
    Q = np.array([p.q for p in pts])
    dp, dq = margin * np.ptp(P), margin * np.ptp(Q)
    return np.linspace(P.min() - dp, P.max() + dp, n), np.linspace(Q.min() - dq, Q.max() + dq, n)


class _Cell:
    """LP data of one pinned cell; stochastic rows carry the slack column."""

    def __init__(self, model: VppModel, t: int, P: float, Q: float):
        pr = model.rows(t)
        rr = model.realized(t)
        n = model.n_x
        self.rr = rr
        nf, ns = pr.fleet_A.shape[0], len(rr)
        self.n = n
        self.A = np.vstack([
            np.hstack([pr.fleet_A, np.zeros((nf, 1))]),
            np.hstack([rr.G, np.ones((ns, 1))]),
        ])
        self.b_fleet = pr.fleet_b
        self.ns = ns
        self.A_eq = np.array([np.r_[pr.pcc_p, 0.0], np.r_[pr.pcc_q, 0.0]])
        self.b_eq = np.array([P - pr.pcc_p0, Q - pr.pcc_q0])

    def solve(self, e):
        rhs = self.rr.h - self.rr.Ea @ e
        lp = LinearProgram.build(
            np.r_[np.zeros(self.n), 1.0],
            self.A,
            np.r_[self.b_fleet, rhs],
            self.A_eq,
            self.b_eq,
            ub=np.r_[np.full(self.n, np.inf), 1.0],
            sense="max",
        )
        return solve_lp(lp, verify=False)


def _cell_seed(seed: int, i: int, j: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, i, j])


def scenario_feasibility(model: VppModel, t: int, P: float, Q: float, E: np.ndarray, method: str = "certificate"):
    """Boolean feasibility per scenario row of ``E`` and the number of LPs solved."""
    cell = _Cell(model, t, P, Q)
    S = len(E)
    feas = np.zeros(S, dtype=bool)
    if method == "per-scenario":
        for k in range(S):
            res = cell.solve(E[k])
            if res.status is LpStatus.INFEASIBLE:
                return feas, k + 1
            feas[k] = res.ok and res.x[-1] >= -FEAS_TOL
        return feas, S
    if method != "certificate":
        raise ValueError(f"unknown method {method!r}")
    EaE = E @ cell.rr.Ea.T  # (S, rows): error part of every realised row
    undecided = np.ones(S, dtype=bool)
    lps = 0
    while undecided.any():
        k = int(np.argmax(undecided))
        res = cell.solve(E[k])
        lps += 1
        if res.status is LpStatus.INFEASIBLE:
            # fleet and PCC rows alone conflict: no scenario can be met
            return feas, lps
        if not res.ok:
            raise RuntimeError(f"cell ({P}, {Q}) scenario {k}: {res.status.name}")
        x, tstar = res.x[: cell.n], res.x[-1]
        slack_k = cell.rr.h - cell.rr.G @ x
        ok = np.all(EaE <= slack_k + FEAS_TOL, axis=1) & undecided
        feas[ok] = True
        undecided &= ~ok
        y = res.duals_ub[-cell.ns:]
        bound = tstar - (EaE - EaE[k]) @ y
        bad = (bound < -FEAS_TOL) & undecided
        undecided &= ~bad
        if undecided[k]:
            feas[k] = tstar >= -FEAS_TOL
            undecided[k] = False
    return feas, lps


def _nonlinear_ok(model: VppModel, t: int, x: np.ndarray, e: np.ndarray) -> bool:
    net = model.network
    inj = model.rows(t).injmap(x, e)
    st = solve_load_flow(net, inj)
    V = np.abs(st.voltages)
    for k, (bus, ph) in enumerate(model.linmodel.nodes):
        if bus == net.pcc:
            continue
        b = net.bus(bus)
        if not b.v_min - FEAS_TOL <= V[k] <= b.v_max + FEAS_TOL:
            return False
    I = signed_currents(model.linmodel, st)
    imax = np.array([br.i_max for br in net.branches for _ in br.phases])
    return bool(np.all(np.abs(I) <= imax + FEAS_TOL))


def _cell_confidence(ij, model, t, p_axis, q_axis, S, seed, method, network):
    i, j = ij
    E = uncert.sample(model.gmm(t), S, seed=_cell_seed(seed, i, j))
    P, Q = p_axis[j], q_axis[i]
    if network == "nonlinear":
        cell = _Cell(model, t, P, Q)
        ok = 0
        for e in E:
            res = cell.solve(e)
            if res.ok and res.x[-1] >= -FEAS_TOL and _nonlinear_ok(model, t, res.x[: cell.n], e):
                ok += 1
        return ok / S, S
    feas, lps = scenario_feasibility(model, t, P, Q, E, method)
    return feas.mean(), lps


def mc_confidence_grid(
    model: VppModel,
    t: int,
    p_axis,
    q_axis,
    n_scenarios: int = 500,
    seed: int = 0,
    method: str = "certificate",
    network: str = "linear",
    jobs: int | None = None,
) -> McGrid:
    """Fraction of feasible error scenarios at every ``(P, Q)`` grid point.

    ``network='nonlinear'`` re-checks each linear-feasible dispatch with the
    full load flow (no re-optimisation, so it can only lower a cell's value).
    """
    if n_scenarios < 100:
        raise ValueError("n_scenarios must be at least 100")
    p_axis, q_axis = np.asarray(p_axis, float), np.asarray(q_axis, float)
    cells = [(i, j) for i in range(len(q_axis)) for j in range(len(p_axis))]
    fn = partial(_cell_confidence, model=model, t=t, p_axis=p_axis, q_axis=q_axis, S=n_scenarios,
                 seed=seed, method=method, network=network)
    out = map_jobs(fn, cells, jobs)
    conf = np.array([c for c, _ in out]).reshape(len(q_axis), len(p_axis))
    return McGrid(p_axis, q_axis, conf, n_scenarios, seed, t, int(sum(n for _, n in out)))


def per_constraint_violation_rate(
    model: VppModel, t: int, x: np.ndarray, row: int, n_samples: int = 100_000, seed: int = 0
) -> float:
    """Empirical violation frequency of one realised stochastic row at fixed ``x``."""
    rr = model.realized(t)
    E = uncert.sample(model.gmm(t), n_samples, seed=seed)
    lhs = rr.G[row] @ x + E @ rr.Ea[row]
    return float(np.mean(lhs > rr.h[row]))


def row_index(model: VppModel, t: int, kind: str, tag=()) -> int:
    rr = model.realized(t)
    for k, (kd, tg) in enumerate(zip(rr.kinds, rr.tags)):
        if kd == kind and tuple(tg) == tuple(tag):
            return k
    raise KeyError((kind, tag))


def compare_surfaces(surface, grid: McGrid) -> dict:
    """RMSE and R^2 of the analytic surface against the grid values."""
    Pm, Qm = grid.mesh()
    a = np.asarray(surface(Pm, Qm), dtype=float)
    y = grid.confidence
    sse = float(np.sum((a - y) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    return {
        "rmse": float(np.sqrt(sse / y.size)),
        "r2": 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else 0.0),
        "cells": int(y.size),
        "max_abs": float(np.max(np.abs(a - y))),
    }


def chance_spec_rows(model: VppModel, t: int, gamma: float):
    return model.chance_rows(t, ChanceSpec.from_gamma(gamma))
