"""Stochastic PQ flexibility range: ray sweeps, confidence surface, level polygons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import cpwl
from .ccopf import ChanceSpec, VppModel, period_lp_rows
from .derfleet import clip_polygon, polygon_area
from .jobs import map_jobs
from .lpcore import LinearProgram, LpStatus, resolve_rhs, solve_lp

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.99)
DEFAULT_ANGLES = 32
DEFAULT_PIECES = 16
EXTERIOR_SCALES = (1.1, 1.3)
SHARED_TOL = 1e-3
CAP_PUSH = 1e-3


class UnachievableLevel(RuntimeError):
    pass


@dataclass(frozen=True)
class PfrPoint:
    p: float
    q: float
    phi: float
    gamma: float
    t: int
    r: float
    # outward normal of a supporting line of the swept region at this point
    normal: tuple[float, float] | None = field(default=None, compare=False)


def _spec(gamma):
    return None if gamma is None else ChanceSpec.from_gamma(gamma)


def find_anchor(model: VppModel, t: int, gamma: float | None) -> tuple[float, float]:
    """PCC point of the dispatch with the largest worst-case normalised slack.

    Rows are those of ``gamma`` (fleet rows only when ``None``).  A strictly
    positive slack makes the point interior to every lower-confidence region.
    """
    A, b = period_lp_rows(model, t, _spec(gamma))
    n = model.n_x
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 0
    if np.any(b[~keep] < -1e-12):
        raise UnachievableLevel(f"period {t}: constant row violated at confidence {gamma}")
    A, b, norms = A[keep], b[keep], norms[keep]
    # rows paired with their negation are equalities and carry no slack
    norms = np.where(_paired(A, b), 0.0, norms)
    # max s  s.t.  A x + s |A_i| <= b,  s <= 1
    lp = LinearProgram.build(
        np.r_[np.zeros(n), 1.0],
        np.column_stack([A, norms]),
        b,
        lb=np.r_[np.full(n, -np.inf), -np.inf],
        ub=np.r_[np.full(n, np.inf), 1.0],
        sense="max",
    )
    res = solve_lp(lp)
    if not res.ok or res.x[-1] < 1e-9:
        raise UnachievableLevel(f"period {t}: no interior point at confidence {gamma}")
    pr = model.rows(t)
    x = res.x[:n]
    return float(pr.pcc_p @ x + pr.pcc_p0), float(pr.pcc_q @ x + pr.pcc_q0)


def _paired(A, b, tol=1e-12) -> np.ndarray:
    Z = np.column_stack([A, b])
    Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    D = np.abs(Z @ Z.T + 1.0)
    np.fill_diagonal(D, np.inf)
    return D.min(axis=1) < tol


def _ray_lp(A, b, pr, n, anchor, phi):
    A_eq = np.array([np.r_[pr.pcc_p, -np.cos(phi)], np.r_[pr.pcc_q, -np.sin(phi)]])
    b_eq = np.array([anchor[0] - pr.pcc_p0, anchor[1] - pr.pcc_q0])
    return LinearProgram.build(
        np.r_[np.zeros(n), 1.0],
        np.column_stack([A, np.zeros(len(b))]),
        b,
        A_eq,
        b_eq,
        lb=np.r_[np.full(n, -np.inf), 0.0],
        sense="max",
    )


def _point(res, anchor, phi, gamma, t) -> PfrPoint:
    r = float(res.x[-1])
    u = np.array([np.cos(phi), np.sin(phi)])
    # the optimal r falls as the anchor moves outward: -dr/d(anchor) is normal
    nrm = -np.asarray(res.duals_eq, dtype=float)
    normal = tuple(nrm / (nrm @ u)) if np.all(np.isfinite(nrm)) and nrm @ u > 1e-12 else None
    return PfrPoint(anchor[0] + r * u[0], anchor[1] + r * u[1], phi, gamma, t, r, normal)


def _ray(phi, model, t, levels, anchor):
    """Boundary points along one ray for every ``(gamma, A, b)`` in ``levels``.

    Consecutive levels differ only in right-hand sides, so each level first
    tries to re-solve from the previous optimum and falls back to a full LP.
    """
    pr = model.rows(t)
    n = model.n_x
    out, lp, res = [], None, None
    for gamma, A, b in levels:
        nxt = None
        if res is not None and res.ok and lp.A_ub.shape[0] == len(b) and np.array_equal(lp.A_ub[:, :n], A):
            nxt = resolve_rhs(lp, res, b)
        if nxt is None:
            lp = _ray_lp(A, b, pr, n, anchor, phi)
            nxt = solve_lp(lp)
            if nxt.status is LpStatus.UNBOUNDED:
                raise UnachievableLevel(f"period {t}: unbounded flexibility along angle {phi:.4f}")
        res = nxt
        out.append(_point(res, anchor, phi, gamma, t) if res.ok else None)
    return out


def sweep_levels(
    model: VppModel,
    t: int,
    gammas,
    n_angles: int = DEFAULT_ANGLES,
    anchor: tuple[float, float] | None = None,
    jobs: int | None = None,
) -> dict:
    """Ray sweeps of several levels from one anchor.

    Returns ``{gamma: [PfrPoint, ...]}``; a level whose region misses the
    anchor maps to ``None``.  ``None`` as a level sweeps the fleet rows alone.
    """
    if n_angles < 8:
        raise ValueError("n_angles must be at least 8")
    gammas = list(gammas)
    for g in gammas:
        if g is not None and not 0.5 < g < 1.0:
            raise ValueError("confidence level must lie in (0.5, 1)")
    if anchor is None:
        anchor = find_anchor(model, t, max((g for g in gammas if g is not None), default=None))
    levels = [(g, *period_lp_rows(model, t, _spec(g))) for g in gammas]
    angles = [2.0 * np.pi * k / n_angles for k in range(n_angles)]
    rays = map_jobs(partial(_ray, model=model, t=t, levels=levels, anchor=anchor), angles, jobs)
    out = {}
    for i, g in enumerate(gammas):
        pts = [ray[i] for ray in rays]
        out[g] = None if any(p is None for p in pts) else pts
    return out


def sweep_pfr(
    model: VppModel,
    t: int,
    gamma: float | None,
    n_angles: int = DEFAULT_ANGLES,
    anchor: tuple[float, float] | None = None,
    jobs: int | None = None,
) -> list[PfrPoint]:
    """Boundary of the confidence-``gamma`` PQ region along ``n_angles`` rays.

    ``gamma=None`` sweeps the fleet rows alone (no network or chance rows).
    """
    if anchor is None:
        anchor = find_anchor(model, t, gamma)
    pts = sweep_levels(model, t, [gamma], n_angles, anchor, jobs)[gamma]
    if pts is None:
        # the anchor lies outside this level: the level cannot be swept from it
        raise UnachievableLevel(f"period {t}: anchor infeasible at confidence {gamma}")
    return pts


@dataclass(frozen=True)
class PfrSurface:
    model: cpwl.PwlModel
    t: int
    anchor: tuple[float, float]
    gammas: tuple[float, ...]
    points: tuple[PfrPoint, ...] = field(repr=False)
    exterior: np.ndarray = field(repr=False)
    rmse: float = float("nan")
    r2: float = float("nan")
    # fleet-only region {z : A z <= b}; confidence is zero outside it
    domain: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)
    # (P, Q, gamma) rows where the confidence is known to stay below gamma
    caps: np.ndarray | None = field(default=None, repr=False)

    def __call__(self, P, Q) -> np.ndarray:
        return conf_at(self, P, Q)

    def scatter(self) -> tuple[np.ndarray, np.ndarray]:
        """Training inputs and targets (boundary points then exterior zeros)."""
        X = np.array([[p.p, p.q] for p in self.points]).reshape(-1, 2)
        y = np.array([p.gamma for p in self.points])
        X = np.vstack([X, self.exterior])
        return X, np.r_[y, np.zeros(len(self.exterior))]


def build_surface(
    model: VppModel,
    t: int,
    gammas=DEFAULT_GAMMAS,
    n_angles: int = DEFAULT_ANGLES,
    m: int = DEFAULT_PIECES,
    restarts: int = 10,
    seed: int = 0,
    exterior: str = "hinge",
    jobs: int | None = None,
) -> PfrSurface:
    gammas = tuple(sorted(float(g) for g in gammas))
    if len(gammas) < 4:
        raise ValueError("need at least 4 confidence levels")
    anchor = None
    for g in reversed(gammas):
        try:
            anchor = find_anchor(model, t, g)
            break
        except UnachievableLevel:
            log.warning("period %d: confidence %.3f unachievable", t, g)
    if anchor is None:
        raise UnachievableLevel(f"period {t}: no confidence level achievable")
    swept = sweep_levels(model, t, [*reversed(gammas), None], n_angles, anchor, jobs)
    points, kept = [], []
    for g in gammas:
        if swept[g] is None:
            log.warning("skipping level %.3f: anchor outside its region", g)
            continue
        points += swept[g]
        kept.append(g)
    points = relabel_shared(points)
    fleet = swept[None]
    if fleet is None:
        raise UnachievableLevel(f"period {t}: anchor outside the fleet region")
    domain = fleet_domain(fleet)
    ext = exterior_points(fleet, anchor)
    caps = level_caps({g: swept[g] for g in kept}, anchor, domain)
    points.sort(key=lambda p: (p.gamma, p.phi))
    X = np.vstack([np.array([[p.p, p.q] for p in points]), ext, caps[:, :2]])
    y = np.r_[[p.gamma for p in points], np.zeros(len(ext)), caps[:, 2]]
    upper = np.r_[np.zeros(len(points) + len(ext), bool), np.ones(len(caps), bool)]
    fit = cpwl.fit_cpwl(X, y, m, "min", restarts, seed, clamp=True, exterior=exterior, center=anchor, upper=upper)
    rep = fit.report
    return PfrSurface(fit, t, anchor, tuple(kept), tuple(points), ext, rep.rmse, rep.r2, domain, caps)


def _corners(pts: list[PfrPoint], anchor, limit: float) -> np.ndarray:
    """Meeting points of the supporting lines at consecutive rays (outside the region)."""
    a = np.asarray(anchor, dtype=float)
    out = []
    for p, q in zip(pts, pts[1:] + pts[:1]):
        if p.normal is None or q.normal is None:
            continue
        M = np.array([p.normal, q.normal])
        if abs(np.linalg.det(M)) < 1e-9 * np.abs(M).max() ** 2:
            continue
        z = np.linalg.solve(M, [M[0] @ (p.p, p.q), M[1] @ (q.p, q.q)])
        if np.linalg.norm(z - a) <= limit:
            out.append(z)
    return np.array(out).reshape(-1, 2)


def fleet_domain(fleet: list[PfrPoint]) -> tuple[np.ndarray, np.ndarray]:
    """Outer polygon of the fleet-only region from the supporting lines of its sweep."""
    pts = [p for p in fleet if p.normal is not None]
    A = np.array([p.normal for p in pts]).reshape(-1, 2)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    b = np.einsum("ij,ij->i", A, np.array([[p.p, p.q] for p in pts]).reshape(-1, 2))
    return A, b


def exterior_points(fleet: list[PfrPoint], anchor) -> np.ndarray:
    """Zero-confidence training inputs outside the fleet region.

    Ray ends and the corners of the outer polygon, scaled away from the anchor.
    """
    a = np.asarray(anchor, dtype=float)
    rmax = max(p.r for p in fleet)
    base = np.vstack([[[p.p, p.q] for p in fleet], _corners(fleet, a, EXTERIOR_SCALES[-1] * rmax)])
    return np.vstack([a + s * (base - a) for s in EXTERIOR_SCALES])


def level_caps(levels: dict, anchor, domain) -> np.ndarray:
    """``(k, 3)`` rows ``(P, Q, gamma)`` of points where confidence is below ``gamma``.

    Each is a corner of the outer polygon of a level region, nudged away from
    the anchor so that it lies strictly outside that region (and so outside
    every higher level).  Corners outside the fleet region are dropped.
    """
    a = np.asarray(anchor, dtype=float)
    A, b = domain
    rows = []
    for g, pts in levels.items():
        rmax = max(p.r for p in pts)
        z = _corners(pts, a, EXTERIOR_SCALES[-1] * rmax)
        z = a + (1.0 + CAP_PUSH) * (z - a)
        z = z[np.all(z @ A.T <= b, axis=1)]
        rows += [(zp, zq, g) for zp, zq in z]
    return np.array(rows, dtype=float).reshape(-1, 3)


def relabel_shared(points: list[PfrPoint], tol: float = SHARED_TOL) -> list[PfrPoint]:
    """Give every boundary point the highest level whose region contains it.

    Where a deterministic limit binds, several levels share one boundary
    point; its confidence is the largest of them.  Radii within the relative
    ``tol`` count as one point (a cliff).  Duplicates are dropped.
    """
    by_ray: dict[float, list[PfrPoint]] = {}
    for p in points:
        by_ray.setdefault(p.phi, []).append(p)
    out = []
    for phi in sorted(by_ray):
        ray = sorted(by_ray[phi], key=lambda p: p.gamma)
        seen = []
        for p in ray:
            eps = tol * max(p.r, 1e-12)
            top = max(q.gamma for q in ray if q.r >= p.r - eps)
            if any(abs(s.r - p.r) <= eps and s.gamma == top for s in seen):
                continue
            q = PfrPoint(p.p, p.q, p.phi, top, p.t, p.r, p.normal)
            seen.append(q)
            out.append(q)
    return out


def conf_at(surface: PfrSurface, P, Q) -> np.ndarray | float:
    X = np.stack(np.broadcast_arrays(np.asarray(P, float), np.asarray(Q, float)), axis=-1)
    out = np.minimum(surface.model(X), 1.0)
    if surface.domain is not None:
        A, b = surface.domain
        out = np.where(np.all(X @ A.T <= b + 1e-9, axis=-1), out, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PfrPolygon:
    """``{z : A z <= b}`` in the (P, Q) plane."""

    A: np.ndarray
    b: np.ndarray
    gamma: float
    t: int
    empty: bool = False
    achievable: float = float("nan")

    @property
    def vertices(self) -> np.ndarray:
        if self.empty:
            return np.zeros((0, 2))
        return clip_polygon(self.A, self.b)

    @property
    def area(self) -> float:
        v = self.vertices
        return polygon_area(v) if len(v) >= 3 else 0.0

    def contains(self, P, Q, tol: float = 1e-9) -> np.ndarray:
        Z = np.stack(np.broadcast_arrays(np.asarray(P, float), np.asarray(Q, float)), axis=-1)
        return np.all(Z @ self.A.T <= self.b + tol, axis=-1)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "t": self.t, "empty": self.empty, "A": self.A.tolist(), "b": self.b.tolist()}


def surface_peak(surface: PfrSurface) -> float:
    """Largest value of the unclamped min-affine surface (may be +inf)."""
    mdl = surface.model
    lp = LinearProgram.build(
        np.array([0.0, 0.0, 1.0]),
        np.column_stack([-mdl.slopes, np.ones(mdl.m)]),
        mdl.intercepts,
        lb=np.full(3, -np.inf),
        sense="max",
    )
    res = solve_lp(lp)
    if res.status is LpStatus.UNBOUNDED:
        return float("inf")
    return float(res.require().value)


def polygon_at(surface: PfrSurface, gamma: float) -> PfrPolygon:
    """Level set ``{conf >= gamma}`` as ``A_gamma z <= b_gamma`` with one row per piece."""
    mdl = surface.model
    A = -mdl.slopes
    b = mdl.intercepts - gamma
    peak = surface_peak(surface)
    if not gamma < peak:
        return PfrPolygon(A, b, gamma, surface.t, empty=True, achievable=peak)
    return PfrPolygon(A, b, gamma, surface.t, achievable=peak)
