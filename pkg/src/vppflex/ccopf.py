"""Chance-constrained OPF: affine coefficients, quantile rows and solves.

Every monitored quantity is written as ``a @ e + b @ x + c`` with ``e`` the
forecast-error vector and ``x`` the DER decision vector of one period.  Each
chance constraint becomes one deterministic row through a quantile of the
projected mixture.  Rows keep their realised (scenario) form ``G x + Ea e <= h``
so that the Monte-Carlo oracle can test the very same constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import derfleet, uncert
from .derfleet import Fleet, ForecastSeries, InjectionMap, Load
from .lpcore import LinearProgram, LpResult, LpStatus, solve_lp
from .netmodel import LinearNetworkModel, MultiphaseNetwork


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class ChanceSpec:
    alpha_v_plus: float
    alpha_v_minus: float
    alpha_i_plus: float
    alpha_i_minus: float
    alpha_p: float

    def __post_init__(self):
        for name in ("alpha_v_plus", "alpha_v_minus", "alpha_i_plus", "alpha_i_minus", "alpha_p"):
            a = getattr(self, name)
            if not 0.0 < a <= 0.5:
                raise ValueError(f"{name}={a} outside (0, 0.5]")

    @classmethod
    def from_gamma(cls, gamma: float) -> "ChanceSpec":
        a = 1.0 - gamma
        return cls(a, a, a, a, a)

    @property
    def gamma(self) -> float:
        return 1.0 - max(self.alpha_v_plus, self.alpha_v_minus, self.alpha_i_plus, self.alpha_i_minus, self.alpha_p)


@dataclass(frozen=True)
class AffineConstraintCoeffs:
    """Rows ``a @ e + b @ x + c`` for voltages and currents, plus the capability pair."""

    tags: tuple[tuple[str, str, str], ...]  # ("V", bus, phase) / ("I", branch, phase)
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    a_p: np.ndarray
    c_p1: float
    b_p: np.ndarray
    c_p2: float


@dataclass(frozen=True)
class RowInfo:
    kind: str  # V+, V-, I+, I-, P
    tag: tuple
    alpha: float
    quantile: float


@dataclass(frozen=True)
class DeterministicConstraintSet:
    """``G x <= rhs`` with ``rhs`` quantile-adjusted; realised form ``G x + Ea e <= h``."""

    G: np.ndarray
    rhs: np.ndarray
    Ea: np.ndarray
    h: np.ndarray
    rows: tuple[RowInfo, ...]

    def __len__(self):
        return len(self.rows)

    def index(self, kind: str, tag) -> int:
        for k, r in enumerate(self.rows):
            if r.kind == kind and tuple(r.tag) == tuple(tag):
                return k
        raise KeyError((kind, tag))

    def violated(self, x: np.ndarray, E: np.ndarray) -> np.ndarray:
        """Boolean (n_samples, n_rows): realised row violated per error sample."""
        return (self.G @ x)[None, :] + np.atleast_2d(E) @ self.Ea.T > self.h[None, :]


def build_affine_coeffs(
    linmodel: LinearNetworkModel,
    injmap: InjectionMap,
    net: MultiphaseNetwork,
    fleet: Fleet,
    loads: Sequence[Load],
    forecasts: ForecastSeries | None,
    t: int,
    monitor=None,
) -> AffineConstraintCoeffs:
    if injmap.D.shape[0] != len(linmodel.labels) or injmap.D.shape[1] != fleet.n_vars:
        raise OrderingError("injection map does not match the network model or fleet ordering")
    tags, a, b, c, up, lo = [], [], [], [], [], []
    slack = set(k for k, (bus, _) in enumerate(linmodel.nodes) if bus == net.pcc)
    KE, KD, Kc = linmodel.K @ injmap.E, linmodel.K @ injmap.D, linmodel.K @ injmap.const + linmodel.b
    for k, (bus, ph) in enumerate(linmodel.nodes):
        tag = ("V", bus, ph)
        if k in slack or (monitor is not None and tag not in monitor):
            continue
        bb = net.bus(bus)
        tags.append(tag); a.append(KE[k]); b.append(KD[k]); c.append(Kc[k])
        up.append(bb.v_max); lo.append(bb.v_min)
    JE, JD, Jc = linmodel.J @ injmap.E, linmodel.J @ injmap.D, linmodel.J @ injmap.const + linmodel.d
    imax = [br.i_max for br in net.branches for _ in br.phases]
    for k, (name, ph) in enumerate(linmodel.branch_phases):
        tag = ("I", name, ph)
        if monitor is not None and tag not in monitor:
            continue
        tags.append(tag); a.append(JE[k]); b.append(JD[k]); c.append(Jc[k])
        up.append(imax[k]); lo.append(-imax[k])
    n_e, n_x = injmap.E.shape[1], fleet.n_vars
    pv, wt = fleet.renewable_slots("PV"), fleet.renewable_slots("WT")
    n_ren = len(pv) + len(wt)
    a_p = np.concatenate([np.ones(n_ren), -np.ones(n_e - n_ren)])
    b_p = np.zeros(n_x)
    for k, (ui, ph, var) in enumerate(fleet.columns):
        if var == "P" and fleet.units[ui].kind in derfleet.RENEWABLE:
            b_p[k] = 1.0
    load_sum = float(sum(ld.p[t] for ld in loads))
    ren_sum = float(sum(forecasts.at(u, ph, t) for u, ph in pv + wt)) if n_ren else 0.0
    shape = lambda rows, n: np.array(rows).reshape(-1, n)  # noqa: E731
    return AffineConstraintCoeffs(
        tuple(tags),
        shape(a, n_e),
        shape(b, n_x),
        np.array(c, dtype=float),
        np.array(up, dtype=float),
        np.array(lo, dtype=float),
        a_p,
        ren_sum - load_sum,
        b_p,
        -load_sum,
    )


@dataclass(frozen=True)
class RealizedRows:
    """Scenario form ``G x + Ea e <= h`` of every stochastic constraint."""

    G: np.ndarray
    Ea: np.ndarray
    h: np.ndarray
    kinds: tuple[str, ...]
    tags: tuple[tuple, ...]

    def __len__(self):
        return len(self.kinds)


def realized_rows(coeffs: AffineConstraintCoeffs) -> RealizedRows:
    G, Ea, h, kinds, tags = [], [], [], [], []
    for k, tag in enumerate(coeffs.tags):
        a, b, c = coeffs.a[k], coeffs.b[k], coeffs.c[k]
        # upper: b x + a e + c <= limit ; lower: -(b x + a e + c) <= -limit
        G += [b, -b]
        Ea += [a, -a]
        h += [coeffs.upper[k] - c, c - coeffs.lower[k]]
        kinds += [tag[0] + "+", tag[0] + "-"]
        tags += [tag[1:], tag[1:]]
    # scheduled renewable output against its realised availability
    G.append(coeffs.b_p)
    Ea.append(-coeffs.a_p)
    h.append(coeffs.c_p1 - coeffs.c_p2)
    kinds.append("P")
    tags.append(())
    return RealizedRows(np.array(G), np.array(Ea), np.array(h, dtype=float), tuple(kinds), tuple(tags))


def reformulate_chance(coeffs: AffineConstraintCoeffs, gmm: uncert.Gmm, spec: ChanceSpec) -> DeterministicConstraintSet:
    """Quantile rows for the voltage, current and capability chance constraints.

    Upper rows use ``Quant(1 - alpha | a e)``, lower rows ``Quant(alpha | a e)``
    and the capability row ``Quant(alpha_P | a_p e)``, each on the error term
    of that row.
    """
    if gmm.dim != coeffs.a_p.size:
        raise OrderingError(f"GMM dimension {gmm.dim} does not match error vector length {coeffs.a_p.size}")
    rr = realized_rows(coeffs)
    alpha = {"V+": spec.alpha_v_plus, "V-": spec.alpha_v_minus, "I+": spec.alpha_i_plus,
             "I-": spec.alpha_i_minus, "P": spec.alpha_p}
    rhs, info = [], []
    for k, kind in enumerate(rr.kinds):
        a_err = rr.Ea[k] if kind.endswith("+") else -rr.Ea[k]
        level = 1.0 - alpha[kind] if kind.endswith("+") else alpha[kind]
        try:
            q = uncert.quantile(uncert.project(gmm, a_err), level)
        except (uncert.GmmError, ValueError) as exc:
            raise uncert.GmmError(f"quantile failed for row {kind} {rr.tags[k]}: {exc}") from exc
        # upper rows subtract the quantile, lower and capability rows add it
        rhs.append(rr.h[k] - q if kind.endswith("+") else rr.h[k] + q)
        info.append(RowInfo(kind, rr.tags[k], alpha[kind], q))
    return DeterministicConstraintSet(rr.G, np.array(rhs, dtype=float), rr.Ea, rr.h, tuple(info))


@dataclass(frozen=True)
class PeriodRows:
    """Everything one period contributes to an OPF over its decision vector."""

    t: int
    fleet_A: np.ndarray
    fleet_b: np.ndarray
    coeffs: AffineConstraintCoeffs
    pcc_p: np.ndarray  # P_PCC = pcc_p @ x + pcc_p0
    pcc_p0: float
    pcc_q: np.ndarray
    pcc_q0: float
    injmap: InjectionMap


@dataclass
class VppModel:
    """Network, linear model, fleet, loads, forecasts and per-period mixtures."""

    network: MultiphaseNetwork
    linmodel: LinearNetworkModel
    fleet: Fleet
    loads: tuple[Load, ...]
    forecasts: ForecastSeries | None
    gmms: tuple[uncert.Gmm, ...]
    dt: float = 1.0
    monitor: frozenset | None = None
    name: str = "vpp"
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def horizon(self) -> int:
        lengths = {len(ld.p) for ld in self.loads}
        if self.forecasts is not None:
            lengths |= {len(v) for v in self.forecasts.p_max.values()}
        return min(lengths) if lengths else 1

    @property
    def n_x(self) -> int:
        return self.fleet.n_vars

    def gmm(self, t: int) -> uncert.Gmm:
        return self.gmms[t if len(self.gmms) > 1 else 0]

    def rows(self, t: int) -> PeriodRows:
        key = ("rows", t)
        if key not in self._cache:
            inj = derfleet.build_injection_map(self.fleet, self.loads, self.network, t)
            coeffs = build_affine_coeffs(
                self.linmodel, inj, self.network, self.fleet, self.loads, self.forecasts, t, self.monitor
            )
            A, b = derfleet.period_rows(self.fleet, t, self.forecasts)
            lm = self.linmodel
            self._cache[key] = PeriodRows(
                t, A, b, coeffs,
                lm.m @ inj.D, float(lm.m @ inj.const + lm.g_const),
                lm.h @ inj.D, float(lm.h @ inj.const + lm.l),
                inj,
            )
        return self._cache[key]

    def realized(self, t: int) -> RealizedRows:
        key = ("realized", t)
        if key not in self._cache:
            self._cache[key] = realized_rows(self.rows(t).coeffs)
        return self._cache[key]

    def chance_rows(self, t: int, spec: ChanceSpec) -> DeterministicConstraintSet:
        key = ("det", t, spec)
        if key not in self._cache:
            self._cache[key] = reformulate_chance(self.rows(t).coeffs, self.gmm(t), spec)
        return self._cache[key]

    def with_gmms(self, gmms) -> "VppModel":
        return VppModel(self.network, self.linmodel, self.fleet, self.loads, self.forecasts,
                        tuple(gmms), self.dt, self.monitor, self.name)

    def deterministic(self) -> "VppModel":
        """Same model with every forecast error fixed at zero."""
        d = self.gmm(0).dim
        return self.with_gmms([uncert.Gmm.point_mass(d)])


def reachable_box(model: VppModel, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable bounds of the DER decision vector in period ``t`` (chart extents)."""
    fleet = model.fleet
    lo, hi = np.zeros(fleet.n_vars), np.zeros(fleet.n_vars)
    for k, (ui, ph, var) in enumerate(fleet.columns):
        u = fleet.units[ui]
        p_lo, p_hi, q_lo, q_hi = u.charts[u.phases.index(ph)].extent()
        if u.kind in derfleet.RENEWABLE and model.forecasts is not None:
            p_lo, p_hi = max(p_lo, 0.0), min(p_hi, model.forecasts.at(u.name, ph, t))
        lo[k], hi[k] = (p_lo, p_hi) if var == "P" else (q_lo, q_hi)
    return lo, hi


def linearization_error(model: VppModel, n_samples: int = 64, seed: int = 0) -> float:
    """Max relative voltage error of the linear network model over the reachable box.

    Every period is sampled at random box corners and uniform interior points.
    """
    from .netmodel import voltage_error

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(model.horizon):
        lo, hi = reachable_box(model, t)
        corners = np.where(rng.random((n_samples // 2, lo.size)) < 0.5, lo, hi)
        inner = lo + rng.random((n_samples - len(corners), lo.size)) * (hi - lo)
        inj = model.rows(t).injmap
        xs = np.array([inj(x) for x in np.vstack([corners, inner])])
        worst = max(worst, float(voltage_error(model.linmodel, model.network, xs).max()))
    return worst


@dataclass
class CcopfSolution:
    status: LpStatus
    x: np.ndarray | None = None
    p_pcc: float = float("nan")
    q_pcc: float = float("nan")
    value: float = float("nan")
    lp: LpResult | None = None

    @property
    def ok(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def period_lp_rows(model: VppModel, t: int, spec: ChanceSpec | None):
    """Stacked ``A x <= b`` of fleet rows and (if ``spec``) chance rows."""
    pr = model.rows(t)
    if spec is None:
        return pr.fleet_A, pr.fleet_b
    det = model.chance_rows(t, spec)
    return np.vstack([pr.fleet_A, det.G]), np.concatenate([pr.fleet_b, det.rhs])


def solve_ccopf(
    model: VppModel,
    t: int,
    spec: ChanceSpec | None,
    objective: np.ndarray | None = None,
    sense: str = "max",
    extra_ub=None,
    extra_eq=None,
    backend: str = "highs",
) -> CcopfSolution:
    """Optimise ``objective @ x`` over one period's fleet and chance rows.

    ``extra_ub``/``extra_eq`` are ``(A, b)`` pairs over ``x``.  An INFEASIBLE
    status is a legitimate outcome (empty flexibility direction).
    """
    A, b = period_lp_rows(model, t, spec)
    n = model.n_x
    c = np.zeros(n) if objective is None else np.asarray(objective, dtype=float)
    if extra_ub is not None:
        A = np.vstack([A, np.atleast_2d(extra_ub[0])])
        b = np.concatenate([b, np.atleast_1d(extra_ub[1])])
    A_eq, b_eq = (None, None) if extra_eq is None else (np.atleast_2d(extra_eq[0]), np.atleast_1d(extra_eq[1]))
    lp = LinearProgram.build(c, A, b, A_eq, b_eq, sense=sense)
    res = solve_lp(lp, backend=backend)
    if not res.ok:
        return CcopfSolution(res.status, lp=res)
    pr = model.rows(t)
    x = res.x
    return CcopfSolution(
        res.status, x, float(pr.pcc_p @ x + pr.pcc_p0), float(pr.pcc_q @ x + pr.pcc_q0), res.value, res
    )


def pcc_extremes(model: VppModel, t: int, spec: ChanceSpec | None) -> tuple[float, float]:
    """Minimum and maximum PCC active export at period ``t``."""
    pr = model.rows(t)
    hi = solve_ccopf(model, t, spec, pr.pcc_p, "max")
    lo = solve_ccopf(model, t, spec, pr.pcc_p, "min")
    if not (hi.ok and lo.ok):
        raise InfeasiblePeriod(t, spec)
    return lo.p_pcc, hi.p_pcc


class InfeasiblePeriod(RuntimeError):
    def __init__(self, t, spec):
        gamma = None if spec is None else round(spec.gamma, 6)
        super().__init__(f"period {t} infeasible at confidence {gamma}")
        self.t = t
        self.gamma = gamma
