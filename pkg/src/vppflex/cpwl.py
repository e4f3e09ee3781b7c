"""Max-affine / min-affine fitting by alternating partition and refit."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import least_squares

RIDGE = 1e-8
MAX_ROUNDS = 100
# rounds without improvement before a restart is abandoned
STALL_ROUNDS = 15
POLISH_TOP = 5


@dataclass(frozen=True)
class FitReport:
    sse: float
    rmse: float
    r2: float
    n_points: int
    n_fitted: int
    rounds: int
    restart: int


@dataclass(frozen=True)
class PwlModel:
    """``min_j`` (MIN) or ``max_j`` (MAX) of ``slopes[j] @ x + intercepts[j]``."""

    slopes: np.ndarray
    intercepts: np.ndarray
    mode: str = "max"
    clamp: bool = False
    report: FitReport | None = field(default=None, compare=False)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.slopes, dtype=float))
        c = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        if s.shape[0] != c.size or c.size < 1:
            raise ValueError("need m >= 1 pieces with matching slopes and intercepts")
        if self.mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {self.mode!r}")
        object.__setattr__(self, "slopes", s)
        object.__setattr__(self, "intercepts", c)

    @property
    def m(self) -> int:
        return self.intercepts.size

    @property
    def dim(self) -> int:
        return self.slopes.shape[1]

    def pieces(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise ValueError(f"input dimension {X.shape[-1]} != model dimension {self.dim}")
        return X @ self.slopes.T + self.intercepts

    def __call__(self, X) -> np.ndarray:
        v = self.pieces(X)
        out = v.min(axis=-1) if self.mode == "min" else v.max(axis=-1)
        if self.clamp and self.mode == "min":
            out = np.maximum(out, 0.0)
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "clamp": self.clamp,
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "PwlModel":
        return cls(np.array(d["slopes"], dtype=float), np.array(d["intercepts"], dtype=float), d["mode"], d["clamp"])


def eval_pwl(model: PwlModel, X) -> np.ndarray:
    return model(X)


def fit_stats(y, yhat) -> tuple[float, float, float]:
    """(SSE, RMSE, R^2) of predictions against targets."""
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    sse = float(np.sum((y - yhat) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else 0.0)
    return sse, float(np.sqrt(sse / max(y.size, 1))), r2


def _lstsq(Xa: np.ndarray, y: np.ndarray) -> np.ndarray:
    G = Xa.T @ Xa + RIDGE * np.eye(Xa.shape[1])
    return np.linalg.solve(G, Xa.T @ y)


def _refit_all(Xa, y, lab, m):
    """Ridge least squares of every piece on its labelled points (``-1`` = none)."""
    d1 = Xa.shape[1]
    on = lab >= 0
    H = np.zeros((m, Xa.shape[0]))
    H[lab[on], np.flatnonzero(on)] = 1.0
    G = np.einsum("jn,nk,nl->jkl", H, Xa, Xa) + RIDGE * np.eye(d1)
    return np.linalg.solve(G, ((H * y) @ Xa)[..., None])[..., 0]


def _kmeans_init(Xa, y, m, rng):
    """Pieces from local fits near the k-means centroids of the inputs."""
    n, d1 = Xa.shape
    k = min(m, n)
    scale = Xa[:, :-1].std(axis=0)
    scale[scale == 0] = 1.0
    Z = Xa[:, :-1] / scale
    centroids, labels = kmeans2(Z, k, minit="++", seed=rng, missing="warn")
    local = max(2 * d1, n // (4 * m))
    W = np.zeros((m, d1))
    for j in range(m):
        if j < k and np.any(labels == j):
            idx = np.flatnonzero(labels == j)
            dist = np.sum((Z[idx] - centroids[j]) ** 2, axis=1)
            idx = idx[np.argsort(dist, kind="stable")[:local]]
        else:
            idx = rng.choice(n, size=min(n, local), replace=False)
        W[j] = _lstsq(Xa[idx], y[idx])
    return W


def _sector_init(Xa, y, m, rng, center, offset, use):
    """Pieces from fits on ``m`` equal angular sectors around ``center``."""
    n, d1 = Xa.shape
    ang = np.arctan2(Xa[:, 1] - center[1], Xa[:, 0] - center[0]) % (2 * np.pi)
    sec = np.floor(ang / (2 * np.pi) * m + offset).astype(int) % m
    W = np.zeros((m, d1))
    for j in range(m):
        idx = np.flatnonzero((sec == j) & use)
        if idx.size < d1:
            idx = rng.choice(n, size=min(n, 2 * d1), replace=False)
        W[j] = _lstsq(Xa[idx], y[idx])
    return W


def _one_sided(r, side):
    """Residuals with one-sided targets: ``side`` +1 needs ``F >= y``, -1 ``F <= y``."""
    return np.where(side > 0, np.minimum(r, 0.0), np.where(side < 0, np.maximum(r, 0.0), r))


def _fit_max(Xa, y, m, W, side, max_rounds):
    """Alternating partition and refit of a max-affine model from pieces ``W``.

    Points with nonzero ``side`` carry one-sided targets; they take part in
    a refit only while the current model violates them.  Returns the best
    iterate seen.
    """
    n, d1 = Xa.shape
    scale = Xa[:, :-1].std(axis=0)
    Z = Xa[:, :-1] / np.where(scale > 0, scale, 1.0)
    tol = 1e-12 * max(1.0, float(np.abs(y).max()))
    prev, best = None, (np.inf, W.copy(), 0)
    rounds = 0
    stall = 0
    for rounds in range(1, max_rounds + 1):
        F = Xa @ W.T
        fmax = F.max(axis=1)
        lab = np.argmax(F, axis=1)
        err = _one_sided(fmax - y, side)
        active = (side == 0) | (err != 0)
        sse = float(err @ err)
        if sse < best[0] * (1 - 1e-9):
            best, stall = (sse, W.copy(), rounds), 0
        else:
            stall += 1
        key = np.where(active, lab, -1)
        if (prev is not None and np.array_equal(key, prev)) or stall >= STALL_ROUNDS:
            break
        prev = key
        counts = np.bincount(key[key >= 0], minlength=m)
        W = np.where((counts >= d1)[:, None], _refit_all(Xa, y, key, m), W)
        resid = np.abs(err)
        for j in np.flatnonzero(counts < d1):
            if resid.max() <= tol:
                break
            # re-seed an empty piece around the worst-fit point
            worst = int(np.argmax(resid))
            dist = np.sum((Z - Z[worst]) ** 2, axis=1)
            idx = np.argsort(dist, kind="stable")[: 2 * d1]
            resid[idx] = 0.0
            W[j] = _lstsq(Xa[idx], y[idx])
    return best[1], best[2]


def _polish(Xa, y, W, side):
    """Local least-squares descent on all pieces jointly (the loss is smooth a.e.)."""
    n, d1 = Xa.shape
    m = W.shape[0]
    rows = np.arange(n)

    def resid(w):
        F = Xa @ w.reshape(m, d1).T
        return _one_sided(F.max(axis=1) - y, side)

    def jac(w):
        F = Xa @ w.reshape(m, d1).T
        lab = F.argmax(axis=1)
        on = (side == 0) | (_one_sided(F[rows, lab] - y, side) != 0)
        J = np.zeros((n, m * d1))
        for k in range(d1):
            J[rows, lab * d1 + k] = Xa[:, k] * on
        return J

    res = least_squares(resid, W.ravel(), jac=jac, method="trf", max_nfev=200)
    return res.x.reshape(m, d1)


def fit_cpwl(
    X,
    y,
    m: int,
    mode: str = "max",
    restarts: int = 10,
    seed: int = 0,
    clamp: bool = False,
    exterior: str = "hinge",
    max_rounds: int = MAX_ROUNDS,
    center=None,
    polish: bool = True,
    upper=None,
) -> PwlModel:
    """Fit a max-affine (``mode='max'``) or min-affine (``'min'``) function.

    With ``clamp`` (MIN mode) the model is ``max(0, min_j ...)``.  Points with
    zero target are then either left out of piece refits (``exterior =
    'exclude'``) or treated as floors that only pull pieces down where the
    model is positive (``'hinge'``, the squared error of the clamped model).
    ``upper`` marks further points whose targets only bound the model from
    above.  The report covers every point except those.

    Pieces start from k-means cells by default.  For 2-D data arranged
    around a ``center`` (level rings of a surface) they start from angular
    sectors instead, rotated by a fraction of a sector on each restart.
    ``polish`` ends the best few restarts with a joint least-squares descent.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y lengths differ")
    if m < 1:
        raise ValueError("m must be at least 1")
    n, d = X.shape
    upper = np.zeros(n, bool) if upper is None else np.asarray(upper, bool).ravel()
    if upper.size != n:
        raise ValueError("upper mask length differs from the point count")
    if n - upper.sum() < m * (d + 1):
        raise ValueError(f"need at least m*(dim+1) = {m * (d + 1)} points, got {n - upper.sum()}")
    sign = -1.0 if mode == "min" else 1.0
    use = np.ones(n, bool)
    bound = upper.copy()
    if clamp and mode == "min":
        floor = (y <= 0.0) & ~upper
        if exterior == "exclude":
            use = ~floor
        elif exterior == "hinge":
            bound |= floor
        else:
            raise ValueError(f"unknown exterior handling {exterior!r}")
    Xa = np.column_stack([X[use], np.ones(int(use.sum()))])
    ys = sign * y[use]
    # an upper bound on the model is a lower bound after the MIN sign flip
    side = np.where(bound[use], -sign, 0.0)
    if np.sum(side == 0) < d + 1:
        raise ValueError("too few points with exact targets")

    def loss(W):
        err = _one_sided((Xa @ W.T).max(axis=1) - ys, side)
        return float(err @ err)

    ss = np.random.SeedSequence(seed)
    runs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r, child in enumerate(ss.spawn(restarts)):
            rng = np.random.default_rng(child)
            if center is None:
                W0 = _kmeans_init(Xa, ys, m, rng)
            else:
                W0 = _sector_init(Xa, ys, m, rng, center, r / restarts, side == 0)
            W, rounds = _fit_max(Xa, ys, m, W0, side, max_rounds)
            runs.append((loss(W), r, W, rounds))
        runs.sort(key=lambda run: (run[0], run[1]))
        if polish:
            # descent from the few best restarts only
            runs[:POLISH_TOP] = [(loss(Wp), r, Wp, k) for _, r, W, k in runs[:POLISH_TOP]
                                 for Wp in [_polish(Xa, ys, W, side)]]
            runs.sort(key=lambda run: (run[0], run[1]))
    _, r, W, rounds = runs[0]
    model = PwlModel(sign * W[:, :-1], sign * W[:, -1], mode, clamp)
    keep = ~upper
    sse, rmse, r2 = fit_stats(y[keep], model(X[keep]))
    report = FitReport(sse, rmse, r2, int(keep.sum()), int((use & keep).sum()), rounds, r)
    return PwlModel(model.slopes, model.intercepts, mode, clamp, report)
