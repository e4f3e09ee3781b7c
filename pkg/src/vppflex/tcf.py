"""Time-coupling flexibility envelope and its robust modification.

The envelope bounds a PCC export trajectory ``P[0..T-1]`` by per-period
power limits, ramp limits between consecutive periods, and limits on the
cumulative exported energy ``dt * sum_{tau <= t} P[tau]``.  It is shrunk
towards its centre until every trajectory inside it can be disaggregated
into a dispatch that meets the fleet's time-coupled rows and the per-period
chance rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection

from . import derfleet
from .ccopf import ChanceSpec, VppModel, pcc_extremes
from .jobs import map_jobs
from .lpcore import LinearProgram, LpError, solve_lp

log = logging.getLogger(__name__)

FAMILIES = ("power", "ramp", "energy")
DEFAULT_THETA = 0.9
DEFAULT_EPS = 1e-4
DEFAULT_MAX_ITER = 60
# above this horizon the outer maximisation samples extreme points
EXACT_HORIZON = 8
N_DIRECTIONS = 200


class TcfNotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TcfEnvelope:
    p_min: np.ndarray
    p_max: np.ndarray
    r_down: np.ndarray  # length T-1: P[t+1] - P[t] >= r_down[t]
    r_up: np.ndarray
    e_min: np.ndarray  # cumulative PCC energy after each period
    e_max: np.ndarray
    dt: float
    gamma: float | None

    def __post_init__(self):
        for name in ("p_min", "p_max", "r_down", "r_up", "e_min", "e_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        T = self.p_min.size
        if T < 1 or self.p_max.size != T or self.e_min.size != T or self.e_max.size != T:
            raise ValueError("power and energy bounds need one entry per period")
        if self.r_down.size != T - 1 or self.r_up.size != T - 1:
            raise ValueError("ramp bounds need one entry per adjacent pair")
        for lo, hi in self.pairs().values():
            if np.any(lo > hi + 1e-12):
                raise ValueError("envelope has a lower bound above its upper bound")

    @property
    def horizon(self) -> int:
        return self.p_min.size

    def pairs(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            "power": (self.p_min, self.p_max),
            "ramp": (self.r_down, self.r_up),
            "energy": (self.e_min, self.e_max),
        }

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """The envelope as ``A P <= b`` over the trajectory."""
        T = self.horizon
        eye = np.eye(T)
        D = eye[1:] - eye[:-1]
        C = self.dt * np.tril(np.ones((T, T)))
        A = np.vstack([eye, -eye, D, -D, C, -C])
        b = np.concatenate([self.p_max, -self.p_min, self.r_up, -self.r_down, self.e_max, -self.e_min])
        return A, b

    def contains(self, P, tol: float = 1e-9) -> bool:
        A, b = self.halfspaces()
        return bool(np.all(A @ np.asarray(P, dtype=float) <= b + tol))

    def within(self, other: "TcfEnvelope", tol: float = 1e-12) -> bool:
        """Every bound pair nested inside the matching pair of ``other``."""
        mine, theirs = self.pairs(), other.pairs()
        return all(
            np.all(mine[k][0] >= theirs[k][0] - tol) and np.all(mine[k][1] <= theirs[k][1] + tol)
            for k in FAMILIES
        )

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "dt": self.dt,
            "p_min": self.p_min.tolist(),
            "p_max": self.p_max.tolist(),
            "r_down": self.r_down.tolist(),
            "r_up": self.r_up.tolist(),
            "e_min": self.e_min.tolist(),
            "e_max": self.e_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "TcfEnvelope":
        return cls(d["p_min"], d["p_max"], d["r_down"], d["r_up"], d["e_min"], d["e_max"], d["dt"], d["gamma"])


def _spec(gamma):
    return None if gamma is None else ChanceSpec.from_gamma(gamma)


def envelope_from_power(p_min, p_max, dt: float, gamma=None) -> TcfEnvelope:
    """Envelope whose ramp and energy bounds are implied by the power bounds."""
    p_min, p_max = np.asarray(p_min, float), np.asarray(p_max, float)
    return TcfEnvelope(
        p_min, p_max,
        p_min[1:] - p_max[:-1], p_max[1:] - p_min[:-1],
        dt * np.cumsum(p_min), dt * np.cumsum(p_max),
        dt, gamma,
    )


def init_envelope(model: VppModel, gamma: float | None, horizon: int | None = None) -> TcfEnvelope:
    """Extreme-point initialisation from per-period chance-constrained OPFs.

    Raises ``InfeasiblePeriod`` when some period has no dispatch at ``gamma``.
    """
    T = horizon or model.horizon
    if not 1 <= T <= model.horizon:
        raise ValueError(f"horizon {T} outside 1..{model.horizon}")
    spec = _spec(gamma)
    ext = np.array([pcc_extremes(model, t, spec) for t in range(T)])
    return envelope_from_power(ext[:, 0], ext[:, 1], model.dt, gamma)


def shrink(env: TcfEnvelope, theta: float, families=FAMILIES) -> TcfEnvelope:
    """Pull every (min, max) pair of the chosen families towards its midpoint."""
    if not 0.5 < theta <= 1:
        raise ValueError(f"theta={theta} must lie in (0.5, 1]")
    new = {}
    for k, (lo, hi) in env.pairs().items():
        if k in families:
            lo, hi = theta * lo + (1 - theta) * hi, theta * hi + (1 - theta) * lo
        new[k] = (lo, hi)
    return TcfEnvelope(*new["power"], *new["ramp"], *new["energy"], env.dt, env.gamma)


class InnerProblem:
    """Smallest total tracking slack of a trajectory over the stacked horizon.

    Columns are the per-period DER vectors followed by ``s+`` and ``s-``.
    """

    def __init__(self, model: VppModel, gamma: float | None, horizon: int):
        T, n = horizon, model.n_x
        spec = _spec(gamma)
        A, b = derfleet.horizon_rows(model.fleet, T, model.forecasts, model.dt)
        blocks, rhs = [A], [b]
        Aeq = np.zeros((T, n * T))
        p0 = np.zeros(T)
        for t in range(T):
            pr = model.rows(t)
            Aeq[t, t * n:(t + 1) * n] = pr.pcc_p
            p0[t] = pr.pcc_p0
            if spec is not None:
                det = model.chance_rows(t, spec)
                Ag = np.zeros((len(det.rhs), n * T))
                Ag[:, t * n:(t + 1) * n] = det.G
                blocks.append(Ag)
                rhs.append(det.rhs)
        I = np.eye(T)
        self.T, self.n = T, n
        self.A_ub = np.hstack([np.vstack(blocks), np.zeros((sum(len(r) for r in rhs), 2 * T))])
        self.b_ub = np.concatenate(rhs)
        self.A_eq = np.hstack([Aeq, I, -I])
        self.p0 = p0
        self.c = np.r_[np.zeros(n * T), np.ones(2 * T)]
        self.lb = np.r_[np.full(n * T, -np.inf), np.zeros(2 * T)]

    def solve(self, P) -> tuple[float, np.ndarray]:
        """Slack sum and DER dispatch (``T x n``) tracking trajectory ``P``."""
        lp = LinearProgram.build(self.c, self.A_ub, self.b_ub, self.A_eq, np.asarray(P, float) - self.p0, self.lb)
        res = solve_lp(lp)
        if not res.ok:
            # the slacks make every trajectory reachable unless the fleet rows conflict
            raise LpError(res.status, f"inner tracking problem: {res.message}")
        nT = self.n * self.T
        return max(float(res.value), 0.0), res.x[:nT].reshape(self.T, self.n)


def _chebyshev(A, b):
    """Centre and radius of the largest ball inside ``A z <= b``."""
    norms = np.linalg.norm(A, axis=1)
    res = linprog(np.r_[np.zeros(A.shape[1]), -1.0], A_ub=np.hstack([A, norms[:, None]]), b_ub=b,
                  bounds=[(None, None)] * A.shape[1] + [(0, None)], method="highs")
    if res.status != 0:
        return None, 0.0
    return res.x[:-1], float(res.x[-1])


def _directional_extremes(A, b, n_dirs: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_dirs):
        res = linprog(rng.standard_normal(A.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * A.shape[1],
                      method="highs")
        if res.status == 0:
            out.append(res.x)
    return np.unique(np.round(np.array(out), 12), axis=0)


def envelope_vertices(env: TcfEnvelope, n_dirs: int = N_DIRECTIONS, seed: int = 0) -> tuple[np.ndarray, bool]:
    """Extreme trajectories of the envelope and whether the list is complete.

    Exact enumeration up to ``EXACT_HORIZON`` periods; beyond it, or for a
    flat envelope, the maximisers of random linear objectives.
    """
    A, b = env.halfspaces()
    T = env.horizon
    if T == 1:
        return np.array([[env.p_min[0]], [env.p_max[0]]]), True
    if T <= EXACT_HORIZON:
        center, radius = _chebyshev(A, b)
        if center is not None and radius > 1e-9:
            hs = HalfspaceIntersection(np.hstack([A, -b[:, None]]), center)
            V = hs.intersections
            return np.unique(np.round(V[np.all(np.isfinite(V), axis=1)], 12), axis=0), True
        log.debug("flat envelope (radius %.3g): sampling extremes", radius)
    return _directional_extremes(A, b, n_dirs, seed), False


@dataclass(frozen=True)
class Violation:
    value: float
    trajectory: np.ndarray
    exact: bool
    n_evaluated: int


def max_violation(model: VppModel, env: TcfEnvelope, jobs: int | None = None, inner: InnerProblem | None = None,
                  seed: int = 0) -> Violation:
    """Worst tracking-slack sum over the envelope's extreme trajectories.

    The slack sum is convex in the trajectory, so its maximum over the
    envelope sits at a vertex; the value is exact when every vertex was
    enumerated and a lower bound otherwise.
    """
    inner = inner or InnerProblem(model, env.gamma, env.horizon)
    V, exact = envelope_vertices(env, seed=seed)
    vals = map_jobs(partial(_slack, inner=inner), list(V), jobs)
    k = int(np.argmax(vals))
    return Violation(float(vals[k]), V[k].copy(), exact, len(V))


def _slack(P, inner):
    return inner.solve(P)[0]


@dataclass
class TcfResult:
    envelope: TcfEnvelope
    converged: bool
    iterations: int
    violations: list[float]
    history: list[TcfEnvelope] = field(repr=False, default_factory=list)
    worst: np.ndarray | None = None

    @property
    def status(self) -> str:
        return "CONVERGED" if self.converged else "NOT_CONVERGED"

    def require(self) -> TcfEnvelope:
        if not self.converged:
            raise TcfNotConverged(
                f"NOT_CONVERGED after {self.iterations} iterations, last violation {self.violations[-1]:.3g}"
            )
        return self.envelope


def _active_families(env: TcfEnvelope, P, tol: float = 1e-9) -> tuple[str, ...]:
    A, b = env.halfspaces()
    tight = A @ P >= b - tol
    T = env.horizon
    sizes = {"power": 2 * T, "ramp": 2 * (T - 1), "energy": 2 * T}
    out, k = [], 0
    for name in FAMILIES:
        if np.any(tight[k:k + sizes[name]]):
            out.append(name)
        k += sizes[name]
    return tuple(out) or FAMILIES


def robust_modify(
    model: VppModel,
    gamma: float | None,
    theta: float = DEFAULT_THETA,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    horizon: int | None = None,
    selective: bool = False,
    jobs: int | None = None,
    env: TcfEnvelope | None = None,
) -> TcfResult:
    """Shrink the extreme-point envelope until its worst slack is below ``eps``.

    ``selective`` shrinks only the bound families that are tight at the
    worst trajectory.  A run that hits ``max_iter`` returns its last
    envelope with ``converged`` false.
    """
    if not 0.5 < theta < 1:
        raise ValueError(f"theta={theta} must lie in (0.5, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    env = env or init_envelope(model, gamma, horizon)
    inner = InnerProblem(model, env.gamma, env.horizon)
    history, viols = [env], []
    worst = None
    for it in range(1, max_iter + 1):
        v = max_violation(model, env, jobs, inner)
        viols.append(v.value)
        worst = v.trajectory
        log.debug("iteration %d: violation %.3g over %d vertices", it, v.value, v.n_evaluated)
        if v.value < eps:
            return TcfResult(env, True, it, viols, history, worst)
        fam = _active_families(env, v.trajectory) if selective else FAMILIES
        env = shrink(env, theta, fam)
        history.append(env)
    return TcfResult(env, False, max_iter, viols, history, worst)


def random_trajectories(env: TcfEnvelope, n: int, seed: int = 0) -> np.ndarray:
    """Random interior trajectories: Dirichlet mixtures of envelope vertices."""
    V, _ = envelope_vertices(env, seed=seed)
    rng = np.random.default_rng(seed)
    W = rng.dirichlet(np.ones(len(V)), size=n)
    return W @ V


def disaggregate(model: VppModel, env: TcfEnvelope, P, inner: InnerProblem | None = None):
    """Slack sum and per-period DER dispatch realising trajectory ``P``."""
    inner = inner or InnerProblem(model, env.gamma, env.horizon)
    return inner.solve(P)
