"""Aggregated VPP operating-cost curve over the PCC active power."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import cpwl
from .ccopf import ChanceSpec, VppModel, pcc_extremes, period_lp_rows
from .lpcore import LinearProgram, solve_lp

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 41
DEFAULT_PIECES = 5
CHP_SEGMENTS = 10


class CostRangeError(ValueError):
    pass


@dataclass(frozen=True)
class DerCostModel:
    """Quadratic generator cost ``a P^2 + b P + c`` and storage rates per p.u.h."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    k_ch: float = 0.0
    k_dis: float = 0.0

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("quadratic cost coefficient must be nonnegative")
        if self.k_ch < 0 or self.k_dis < 0:
            raise ValueError("storage cost rates must be nonnegative")

    def generator(self, p):
        p = np.asarray(p, dtype=float)
        return self.a * p**2 + self.b * p + self.c

    def storage(self, p, dt: float):
        p = np.asarray(p, dtype=float)
        return np.maximum(self.k_dis * p * dt, -self.k_ch * p * dt)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "k_ch": self.k_ch, "k_dis": self.k_dis}


def secant_lines(cost: DerCostModel, lo: float, hi: float, segments: int = CHP_SEGMENTS):
    """Chords of the quadratic cost on ``segments`` equal pieces of ``[lo, hi]``.

    Returns ``(slopes, intercepts)``; their maximum is the piecewise-linear
    interpolant, above the parabola by at most ``a * width**2 / 4``.
    """
    knots = np.linspace(lo, hi, segments + 1)
    f = cost.generator(knots)
    w = np.diff(knots)
    if np.any(w <= 0):
        s = np.array([cost.b + 2 * cost.a * lo])
        return s, np.array([cost.generator(lo) - s[0] * lo])
    s = np.diff(f) / w
    return s, f[:-1] - s * knots[:-1]


@dataclass(frozen=True)
class CostLp:
    """Columns ``[x, z_units]`` with ``cost = sum(z)`` via epigraph rows."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    n_x: int


def cost_rows(model: VppModel, t: int, segments: int = CHP_SEGMENTS) -> CostLp:
    fleet = model.fleet
    n = model.n_x
    priced = [i for i, u in enumerate(fleet.units)
              if u.cost is not None and u.kind in ("CHP", "ESS") and _nonzero(u.cost)]
    k = len(priced)
    rows, rhs = [], []
    for j, ui in enumerate(priced):
        u = fleet.units[ui]
        pc = fleet.p_cols(ui)
        ptot = np.zeros(n)
        ptot[pc] = 1.0
        if u.kind == "CHP":
            lo = sum(ch.extent()[0] for ch in u.charts)
            hi = sum(ch.extent()[1] for ch in u.charts)
            s, icpt = secant_lines(u.cost, lo, hi, segments)
            lines = list(zip(s, icpt))
        else:
            lines = [(u.cost.k_dis * model.dt, 0.0), (-u.cost.k_ch * model.dt, 0.0)]
        for slope, icpt in lines:
            r = np.zeros(n + k)
            r[:n] = slope * ptot
            r[n + j] = -1.0
            rows.append(r)
            rhs.append(-icpt)
    c = np.r_[np.zeros(n), np.ones(k)]
    return CostLp(c, np.array(rows).reshape(-1, n + k), np.array(rhs, dtype=float), n)


def _nonzero(cost: DerCostModel) -> bool:
    return any(v != 0 for v in (cost.a, cost.b, cost.c, cost.k_ch, cost.k_dis))


def min_cost(model: VppModel, t: int, spec: ChanceSpec | None, p_target: float, segments: int = CHP_SEGMENTS):
    """Minimum fleet cost with the PCC active export pinned; ``None`` if infeasible."""
    cl = cost_rows(model, t, segments)
    A, b = period_lp_rows(model, t, spec)
    k = cl.c.size - cl.n_x
    pr = model.rows(t)
    A_all = np.vstack([np.hstack([A, np.zeros((A.shape[0], k))]), cl.A])
    b_all = np.r_[b, cl.b]
    lp = LinearProgram.build(cl.c, A_all, b_all, np.r_[pr.pcc_p, np.zeros(k)], [p_target - pr.pcc_p0])
    res = solve_lp(lp)
    return res.value if res.ok else None


def sample_cost_points(
    model: VppModel,
    gamma: float | None,
    t: int,
    n_samples: int = DEFAULT_SAMPLES,
    segments: int = CHP_SEGMENTS,
) -> np.ndarray:
    """``(n, 2)`` array of ``(P_PCC, cost)`` at equally spaced feasible exports."""
    spec = None if gamma is None else ChanceSpec.from_gamma(gamma)
    lo, hi = pcc_extremes(model, t, spec)
    out = []
    for p in np.linspace(lo, hi, n_samples):
        v = min_cost(model, t, spec, p, segments)
        if v is None:
            log.warning("period %d: cost target %.6f infeasible, dropped", t, p)
            continue
        out.append((p, v))
    if not out:
        raise CostRangeError(f"period {t}: every cost target infeasible; range and rows disagree")
    return np.array(out)


@dataclass(frozen=True)
class CostCurve:
    model: cpwl.PwlModel
    p_min: float
    p_max: float
    t: int = 0
    gamma: float | None = None
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def rmse(self) -> float:
        return self.model.report.rmse if self.model.report else float("nan")

    @property
    def r2(self) -> float:
        return self.model.report.r2 if self.model.report else float("nan")

    def __call__(self, p):
        return eval_cost(self, p)

    def to_dict(self) -> dict:
        return {"t": self.t, "gamma": self.gamma, "p_min": self.p_min, "p_max": self.p_max,
                **{k: v for k, v in self.model.to_dict().items() if k in ("slopes", "intercepts")}}


def fit_cost_curve(samples, m: int = DEFAULT_PIECES, t: int = 0, gamma=None, restarts: int = 10,
                   seed: int = 0) -> CostCurve:
    samples = np.asarray(samples, dtype=float)
    if len(samples) < m + 1:
        raise ValueError(f"need at least {m + 1} samples for {m} pieces")
    fit = cpwl.fit_cpwl(samples[:, :1], samples[:, 1], m, "max", restarts, seed)
    return CostCurve(fit, float(samples[:, 0].min()), float(samples[:, 0].max()), t, gamma, samples)


def eval_cost(curve: CostCurve, p, tol: float = 1e-9):
    p = np.asarray(p, dtype=float)
    if np.any(p < curve.p_min - tol) or np.any(p > curve.p_max + tol):
        raise CostRangeError(f"P outside the curve's validity interval [{curve.p_min}, {curve.p_max}]")
    out = curve.model(p[..., None])
    return float(out) if out.ndim == 0 else out
