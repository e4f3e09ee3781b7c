"""Linear programming under one contract for every subproblem in the package.

Two backends sit behind :func:`solve_lp`:

* ``"highs"`` (default) -- the HiGHS dual simplex shipped with scipy.
* ``"simplex"`` -- a dense two-phase revised simplex written here, with
  Dantzig pricing and a switch to Bland's rule after a run of degenerate
  pivots.  It is meant for desk-scale problems and for cross-checking.

Whatever the backend, an OPTIMAL result is re-verified here (primal residual
and duality gap).  A result that fails verification is reported as
ILL_CONDITIONED rather than returned silently.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

PRIMAL_TOL = 1e-7
GAP_TOL = 1e-6


class LpStatus(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"
    ILL_CONDITIONED = "ILL_CONDITIONED"


class LpError(RuntimeError):
    """Raised when a caller requires an optimal answer and none exists."""

    def __init__(self, status: LpStatus, message: str = ""):
        super().__init__(f"{status.value}: {message}" if message else status.value)
        self.status = status


@dataclass(frozen=True)
class LinearProgram:
    """``min`` or ``max`` of ``c @ x`` subject to row constraints and bounds.

    Rows are stored split by relation: ``A_ub @ x <= b_ub`` and
    ``A_eq @ x == b_eq``.  ``>=`` rows are negated on construction by
    :meth:`from_rows`.
    """

    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    sense: str = "min"
    names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.c)
        for arr, name in ((self.A_ub, "A_ub"), (self.A_eq, "A_eq")):
            if arr.ndim != 2 or arr.shape[1] != n:
                raise ValueError(f"{name} has shape {arr.shape}, expected (*, {n})")
        if len(self.b_ub) != self.A_ub.shape[0] or len(self.b_eq) != self.A_eq.shape[0]:
            raise ValueError("right-hand side length does not match row count")
        if len(self.lb) != n or len(self.ub) != n:
            raise ValueError("bound vectors must match the variable count")
        if self.sense not in ("min", "max"):
            raise ValueError(f"unknown sense {self.sense!r}")
        for arr in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP coefficients must be finite")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @classmethod
    def build(
        cls,
        c,
        A_ub=None,
        b_ub=None,
        A_eq=None,
        b_eq=None,
        lb=None,
        ub=None,
        sense: str = "min",
        names: Sequence[str] = (),
    ) -> "LinearProgram":
        c = np.asarray(c, dtype=float).ravel()
        n = len(c)

        def rows(A, b):
            if A is None:
                return np.zeros((0, n)), np.zeros(0)
            A = np.atleast_2d(np.asarray(A, dtype=float))
            return A.reshape(-1, n), np.asarray(b, dtype=float).ravel()

        A_ub, b_ub = rows(A_ub, b_ub)
        A_eq, b_eq = rows(A_eq, b_eq)
        lb = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,)).copy()
        ub = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,)).copy()
        return cls(c, A_ub, b_ub, A_eq, b_eq, lb, ub, sense, tuple(names))

    @classmethod
    def from_rows(cls, c, rows, lb=None, ub=None, sense="min", names=()):
        """Build from ``(coeffs, relation, rhs)`` triples, relation in ``<=, =, >=``."""
        c = np.asarray(c, dtype=float).ravel()
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for coeffs, rel, rhs in rows:
            coeffs = np.asarray(coeffs, dtype=float)
            if rel == "<=":
                ub_rows.append(coeffs)
                ub_rhs.append(rhs)
            elif rel == ">=":
                ub_rows.append(-coeffs)
                ub_rhs.append(-rhs)
            elif rel in ("=", "=="):
                eq_rows.append(coeffs)
                eq_rhs.append(rhs)
            else:
                raise ValueError(f"unknown relation {rel!r}")
        return cls.build(
            c,
            np.array(ub_rows) if ub_rows else None,
            ub_rhs,
            np.array(eq_rows) if eq_rows else None,
            eq_rhs,
            lb,
            ub,
            sense,
            names,
        )


@dataclass
class LpResult:
    status: LpStatus
    value: float = float("nan")
    x: np.ndarray | None = None
    # Marginals d(value)/d(rhs), in the caller's sense (max or min).
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    iterations: int = 0
    message: str = ""
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    def require(self) -> "LpResult":
        if not self.ok:
            raise LpError(self.status, self.message)
        return self


def _min_form(lp: LinearProgram) -> np.ndarray:
    return lp.c if lp.sense == "min" else -lp.c


def solve_lp(lp: LinearProgram, backend: str = "highs", verify: bool = True) -> LpResult:
    """Solve ``lp`` and return a verified :class:`LpResult`."""
    if backend == "highs":
        res = _solve_highs(lp)
        if res.status is LpStatus.ILL_CONDITIONED:
            # HiGHS occasionally stops with an unknown model status on
            # near-degenerate problems; retry with the other algorithms
            res = _solve_highs(lp, "highs-ipm")
            if res.status is LpStatus.ILL_CONDITIONED:
                res = RevisedSimplex(lp).solve()
    elif backend == "simplex":
        res = RevisedSimplex(lp).solve()
    else:
        raise ValueError(f"unknown LP backend {backend!r}")
    if res.status is LpStatus.INFEASIBLE and backend == "highs" and verify:
        # Certify through a phase-1 elastic problem.
        viol = _phase_one_violation(lp)
        res.info["phase1_violation"] = viol
        if viol <= PRIMAL_TOL:
            res = LpResult(LpStatus.ILL_CONDITIONED, message="infeasibility not certified by phase 1")
    if res.ok and verify:
        _verify(lp, res)
    return res


def _solve_highs(lp: LinearProgram, method: str = "highs-ds") -> LpResult:
    c = _min_form(lp)
    bounds = np.column_stack([lp.lb, lp.ub])
    out = linprog(
        c,
        A_ub=lp.A_ub if lp.A_ub.shape[0] else None,
        b_ub=lp.b_ub if lp.A_ub.shape[0] else None,
        A_eq=lp.A_eq if lp.A_eq.shape[0] else None,
        b_eq=lp.b_eq if lp.A_eq.shape[0] else None,
        bounds=bounds,
        method=method,
    )
    if out.status == 0:
        sign = 1.0 if lp.sense == "min" else -1.0
        duals_ub = sign * np.asarray(out.ineqlin.marginals) if lp.A_ub.shape[0] else np.zeros(0)
        duals_eq = sign * np.asarray(out.eqlin.marginals) if lp.A_eq.shape[0] else np.zeros(0)
        return LpResult(
            LpStatus.OPTIMAL,
            float(sign * out.fun),
            np.asarray(out.x, dtype=float),
            duals_ub,
            duals_eq,
            int(out.nit),
        )
    if out.status == 2:
        return LpResult(LpStatus.INFEASIBLE, message=out.message)
    if out.status == 3:
        return LpResult(LpStatus.UNBOUNDED, message=out.message)
    return LpResult(LpStatus.ILL_CONDITIONED, message=out.message)


def _phase_one_violation(lp: LinearProgram) -> float:
    """Minimal total row violation; positive iff the rows and bounds conflict."""
    n, mu, me = lp.n_vars, lp.A_ub.shape[0], lp.A_eq.shape[0]
    # variables: x, u (ub violation), p/q (eq violation)
    c = np.concatenate([np.zeros(n), np.ones(mu + 2 * me)])
    A_ub = np.hstack([lp.A_ub, -np.eye(mu), np.zeros((mu, 2 * me))]) if mu else None
    A_eq = np.hstack([lp.A_eq, np.zeros((me, mu)), np.eye(me), -np.eye(me)]) if me else None
    bounds = np.vstack([np.column_stack([lp.lb, lp.ub]), np.column_stack([np.zeros(mu + 2 * me), np.full(mu + 2 * me, np.inf)])])
    out = linprog(c, A_ub=A_ub, b_ub=lp.b_ub if mu else None, A_eq=A_eq, b_eq=lp.b_eq if me else None,
                  bounds=bounds, method="highs-ds")
    if out.status != 0:
        return float("nan")
    return float(out.fun)


def bound_multipliers(lp: LinearProgram, duals_ub: np.ndarray, duals_eq: np.ndarray):
    """Split the reduced costs of a min-form solution into bound multipliers."""
    c = _min_form(lp)
    sign = 1.0 if lp.sense == "min" else -1.0
    z = c - lp.A_ub.T @ (sign * duals_ub) - lp.A_eq.T @ (sign * duals_eq)
    z_lo = np.where(z > 0, z, 0.0)
    z_hi = np.where(z < 0, z, 0.0)
    return z_lo, z_hi


def dual_objective(lp: LinearProgram, res: LpResult) -> float:
    """Lagrangian dual value at the returned multipliers, in the caller's sense."""
    sign = 1.0 if lp.sense == "min" else -1.0
    y_ub = sign * res.duals_ub
    y_eq = sign * res.duals_eq
    z_lo, z_hi = bound_multipliers(lp, res.duals_ub, res.duals_eq)
    val = lp.b_ub @ y_ub + lp.b_eq @ y_eq
    scale = 1.0 + np.abs(z_lo).sum() + np.abs(z_hi).sum()
    with np.errstate(invalid="ignore"):
        lo = np.where(z_lo != 0, z_lo * lp.lb, 0.0)
        hi = np.where(z_hi != 0, z_hi * lp.ub, 0.0)
    # Reduced cost against an infinite bound only arises from solver noise.
    lo = np.where(np.isinf(lp.lb) & (np.abs(z_lo) <= 1e-7 * scale), 0.0, lo)
    hi = np.where(np.isinf(lp.ub) & (np.abs(z_hi) <= 1e-7 * scale), 0.0, hi)
    return float(sign * (val + lo.sum() + hi.sum()))


def primal_residual(lp: LinearProgram, x: np.ndarray) -> float:
    r = 0.0
    if lp.A_ub.shape[0]:
        r = max(r, float(np.max(lp.A_ub @ x - lp.b_ub, initial=0.0)))
    if lp.A_eq.shape[0]:
        r = max(r, float(np.max(np.abs(lp.A_eq @ x - lp.b_eq))))
    r = max(r, float(np.max(lp.lb - x, initial=0.0)), float(np.max(x - lp.ub, initial=0.0)))
    return r


def _verify(lp: LinearProgram, res: LpResult) -> None:
    scale = 1.0 + max(
        float(np.max(np.abs(lp.b_ub), initial=0.0)),
        float(np.max(np.abs(lp.b_eq), initial=0.0)),
    )
    resid = primal_residual(lp, res.x)
    dual = dual_objective(lp, res)
    gap = abs(res.value - dual)
    res.info.update(primal_residual=resid, dual_value=dual, duality_gap=gap)
    if resid > PRIMAL_TOL * scale or not np.isfinite(dual) or gap > GAP_TOL * (1.0 + abs(res.value)):
        res.message = f"verification failed: residual={resid:.3g} gap={gap:.3g}"
        res.status = LpStatus.ILL_CONDITIONED


def resolve_rhs(lp: LinearProgram, res: LpResult, b_ub: np.ndarray) -> LpResult | None:
    """Re-solve ``lp`` with inequality right-hand side ``b_ub`` from an optimal ``res``.

    The multipliers of ``res`` stay dual feasible when only ``b_ub`` moves.
    Keeping every row and bound they load tight while shifting ``x`` by the
    least-norm step gives an optimal point whenever that point is still
    primal feasible.  Returns ``None`` when it is not (solve afresh then).
    """
    if not res.ok:
        return None
    b_ub = np.asarray(b_ub, dtype=float)
    new = replace(lp, b_ub=b_ub)
    x = res.x
    tight = np.abs(res.duals_ub) > 1e-10
    z_lo, z_hi = bound_multipliers(lp, res.duals_ub, res.duals_eq)
    fixed = np.flatnonzero((z_lo > 1e-10) | (z_hi < -1e-10))
    n = lp.n_vars
    M = np.vstack([lp.A_ub[tight], lp.A_eq, np.eye(n)[fixed]])
    rhs = np.concatenate([b_ub[tight] - lp.A_ub[tight] @ x, np.zeros(lp.A_eq.shape[0] + fixed.size)])
    step = np.linalg.lstsq(M, rhs, rcond=None)[0] if M.shape[0] else np.zeros(n)
    scale = 1.0 + float(np.max(np.abs(b_ub), initial=0.0))
    if np.max(np.abs(M @ step - rhs), initial=0.0) > 1e-10 * scale:
        return None
    x_new = x + step
    if primal_residual(new, x_new) > 1e-10 * scale:
        return None
    out = LpResult(LpStatus.OPTIMAL, float(lp.c @ x_new), x_new, res.duals_ub, res.duals_eq)
    _verify(new, out)
    return out if out.ok else None


def solve_feasibility(
    lp: LinearProgram,
    target_rows: np.ndarray,
    target_coeffs: np.ndarray,
    backend: str = "highs",
) -> tuple[float, np.ndarray, LpResult]:
    """Minimise total deviation from designated equality targets.

    The rows ``target_coeffs @ x == target_rows`` receive nonnegative slack
    pairs ``s_plus`` and ``s_minus``; the problem minimises their sum subject
    to every row of ``lp`` (whose objective is ignored).  Returns the minimal
    violation, the attaining ``x`` and the raw result (columns ``x, s+, s-``).
    """
    target_coeffs = np.atleast_2d(np.asarray(target_coeffs, dtype=float))
    target_rows = np.asarray(target_rows, dtype=float).ravel()
    k, n = target_coeffs.shape[0], lp.n_vars
    c = np.concatenate([np.zeros(n), np.ones(2 * k)])
    pad = lambda A: np.hstack([A, np.zeros((A.shape[0], 2 * k))])  # noqa: E731
    A_eq = np.vstack([pad(lp.A_eq), np.hstack([target_coeffs, np.eye(k), -np.eye(k)])])
    b_eq = np.concatenate([lp.b_eq, target_rows])
    full = LinearProgram.build(
        c,
        pad(lp.A_ub),
        lp.b_ub,
        A_eq,
        b_eq,
        np.concatenate([lp.lb, np.zeros(2 * k)]),
        np.concatenate([lp.ub, np.full(2 * k, np.inf)]),
    )
    res = solve_lp(full, backend=backend)
    if not res.ok:
        raise LpError(res.status, "slack-penalised feasibility problem")
    slacks = res.x[n:]
    if np.any(slacks < -PRIMAL_TOL):
        raise LpError(LpStatus.ILL_CONDITIONED, "negative violation slack")
    return res.value, res.x[:n], res


class RevisedSimplex:
    """Dense two-phase revised simplex on the standard form ``A y = b, y >= 0``.

    Every original variable is mapped to nonnegative columns (shifted by a
    finite lower bound, mirrored at a finite upper bound, or split when free).
    Finite two-sided bounds add a row.  Phase 1 starts from an all-artificial
    basis.
    """

    max_iter = 20000
    degenerate_switch = 50
    tol = 1e-9

    def __init__(self, lp: LinearProgram):
        self.lp = lp
        self._standardise()

    def _standardise(self):
        lp = self.lp
        n = lp.n_vars
        cols = []  # (orig index, sign)
        shift = np.zeros(n)
        extra_rows = []  # (col index, rhs) for y <= u - l
        for j in range(n):
            lo, hi = lp.lb[j], lp.ub[j]
            if np.isfinite(lo):
                shift[j] = lo
                cols.append((j, 1.0))
                if np.isfinite(hi):
                    extra_rows.append((len(cols) - 1, hi - lo))
            elif np.isfinite(hi):
                shift[j] = hi
                cols.append((j, -1.0))
            else:
                cols.append((j, 1.0))
                cols.append((j, -1.0))
        ny = len(cols)
        T = np.zeros((n, ny))
        for k, (j, s) in enumerate(cols):
            T[j, k] = s
        self.T, self.shift = T, shift
        c_min = _min_form(lp)
        mu, me, mb = lp.A_ub.shape[0], lp.A_eq.shape[0], len(extra_rows)
        m = mu + me + mb
        n_std = ny + mu + mb  # structural + slacks for ub rows and bound rows
        A = np.zeros((m, n_std))
        b = np.zeros(m)
        A[:mu, :ny] = lp.A_ub @ T
        A[:mu, ny:ny + mu] = np.eye(mu)
        b[:mu] = lp.b_ub - lp.A_ub @ shift
        A[mu:mu + me, :ny] = lp.A_eq @ T
        b[mu:mu + me] = lp.b_eq - lp.A_eq @ shift
        for r, (k, rhs) in enumerate(extra_rows):
            A[mu + me + r, k] = 1.0
            A[mu + me + r, ny + mu + r] = 1.0
            b[mu + me + r] = rhs
        row_sign = np.where(b < 0, -1.0, 1.0)
        A *= row_sign[:, None]
        b *= row_sign
        self.A, self.b, self.row_sign = A, b, row_sign
        self.c = np.concatenate([c_min @ T, np.zeros(mu + mb)])
        self.const = float(c_min @ shift)
        self.mu, self.me, self.ny = mu, me, ny

    def _iterate(self, A, b, c, basis, allowed):
        """Run simplex pivots from a feasible ``basis``.  Returns (status, basis, iters)."""
        m = A.shape[0]
        degenerate_run = 0
        bland = False
        it = 0
        while it < self.max_iter:
            it += 1
            B = A[:, basis]
            try:
                xB = np.linalg.solve(B, b)
                pi = np.linalg.solve(B.T, c[basis])
            except np.linalg.LinAlgError:
                return "singular", basis, it
            d = c - A.T @ pi
            d[basis] = 0.0
            d[~allowed] = 0.0
            scale = 1.0 + np.abs(c).max(initial=0.0)
            cand = np.flatnonzero(d < -self.tol * scale)
            if cand.size == 0:
                return "optimal", basis, it
            q = int(cand[0]) if bland else int(cand[np.argmin(d[cand])])
            u = np.linalg.solve(B, A[:, q])
            pos = u > self.tol
            if not np.any(pos):
                return "unbounded", basis, it
            ratios = np.full(m, np.inf)
            ratios[pos] = np.maximum(xB[pos], 0.0) / u[pos]
            tmin = ratios.min()
            ties = np.flatnonzero(ratios <= tmin + self.tol)
            # Bland: leave the smallest variable index among ties
            r = int(ties[np.argmin(np.asarray(basis)[ties])])
            if tmin <= self.tol:
                degenerate_run += 1
                if degenerate_run >= self.degenerate_switch:
                    bland = True
            else:
                degenerate_run = 0
            basis = list(basis)
            basis[r] = q
        return "iteration_limit", basis, it

    def solve(self) -> LpResult:
        A, b, c = self.A, self.b, self.c
        m, n_std = A.shape
        if m == 0:
            # only bounds: optimum at a bound or unbounded
            if np.any(c < -self.tol):
                return LpResult(LpStatus.UNBOUNDED)
            y = np.zeros(n_std)
            return self._finish(y, np.zeros(0), 0)
        # phase 1
        A1 = np.hstack([A, np.eye(m)])
        c1 = np.concatenate([np.zeros(n_std), np.ones(m)])
        basis = list(range(n_std, n_std + m))
        allowed = np.ones(n_std + m, dtype=bool)
        status, basis, it1 = self._iterate(A1, b, c1, basis, allowed)
        if status != "optimal":
            return LpResult(LpStatus.ILL_CONDITIONED, message=f"phase 1 {status}")
        xB = np.linalg.solve(A1[:, basis], b)
        infeas = float(c1[basis] @ xB)
        if infeas > PRIMAL_TOL * (1.0 + np.abs(b).max()):
            return LpResult(LpStatus.INFEASIBLE, iterations=it1, info={"phase1_violation": infeas})
        # drive artificials out of the basis
        keep_rows = np.ones(m, dtype=bool)
        for r, var in enumerate(list(basis)):
            if var < n_std:
                continue
            B = A1[:, basis]
            row = np.linalg.solve(B.T, np.eye(m)[r]) @ A  # row r of B^-1 A
            row[basis] = 0.0
            cand = np.flatnonzero(np.abs(row) > 1e-7)
            cand = cand[cand < n_std]
            if cand.size:
                basis[r] = int(cand[0])
            else:
                keep_rows[r] = False  # redundant row
        if not keep_rows.all():
            idx = np.flatnonzero(keep_rows)
            basis = [basis[i] for i in idx]
            A2, b2 = A[idx], b[idx]
        else:
            A2, b2 = A, b
        allowed = np.ones(n_std, dtype=bool)
        status, basis, it2 = self._iterate(A2, b2, c, basis, allowed)
        if status == "unbounded":
            return LpResult(LpStatus.UNBOUNDED, iterations=it1 + it2)
        if status != "optimal":
            return LpResult(LpStatus.ILL_CONDITIONED, message=f"phase 2 {status}", iterations=it1 + it2)
        B = A2[:, basis]
        y = np.zeros(n_std)
        y[basis] = np.linalg.solve(B, b2)
        pi_kept = np.linalg.solve(B.T, c[basis])
        pi = np.zeros(m)
        pi[keep_rows] = pi_kept
        return self._finish(y, pi, it1 + it2)

    def _finish(self, y, pi, iters) -> LpResult:
        lp = self.lp
        x = self.T @ y[: self.ny] + self.shift
        value_min = float(self.c @ y + self.const)
        sign = 1.0 if lp.sense == "min" else -1.0
        mu, me = self.mu, self.me
        if pi.size:
            marg = pi * self.row_sign
            duals_ub, duals_eq = sign * marg[:mu], sign * marg[mu:mu + me]
        else:
            duals_ub, duals_eq = np.zeros(mu), np.zeros(me)
        return LpResult(LpStatus.OPTIMAL, sign * value_min, x, duals_ub, duals_eq, iters)
