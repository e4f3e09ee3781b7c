"""Gaussian mixture models of forecast errors.

Multivariate mixtures are fitted by EM, projected onto coefficient vectors
(the image of a mixture under an affine map is again a mixture), and the
resulting scalar mixtures supply CDFs and quantiles for the chance rows.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, ndtr, ndtri

log = logging.getLogger(__name__)

QUANTILE_TOL = 1e-12  # Newton stopping threshold; the contract is 1e-9


class GmmError(ValueError):
    pass


@dataclass(frozen=True)
class Gmm:
    weights: np.ndarray  # (n,)
    means: np.ndarray  # (n, d)
    covs: np.ndarray  # (n, d, d)
    loglik_trace: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        n, d = mu.shape
        if w.shape != (n,) or cov.shape != (n, d, d):
            raise GmmError("inconsistent GMM parameter shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise GmmError("weights must be positive and sum to one")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12):
            raise GmmError("covariances must be symmetric")
        for c in cov:
            if d and np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.trace(c)):
                raise GmmError("covariance is not positive semidefinite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("j,jkl->kl", self.weights, self.covs) + np.einsum("j,jk,jl->kl", self.weights, dev, dev)

    @classmethod
    def point_mass(cls, dim: int) -> "Gmm":
        return cls(np.ones(1), np.zeros((1, dim)), np.zeros((1, dim, dim)))

    def logpdf(self, X: np.ndarray) -> np.ndarray:
        return logsumexp(_component_logpdf(np.atleast_2d(X), self), axis=1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> "Gmm":
        return cls(np.array(data["weights"]), np.array(data["means"]), np.array(data["covs"]))


@dataclass(frozen=True)
class UnivariateGmm:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "sigmas"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if np.any(self.sigmas < 0):
            raise GmmError("standard deviations must be nonnegative")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise GmmError("weights must be positive and sum to one")

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def std(self) -> float:
        m = self.mean()
        var = self.weights @ (self.sigmas**2 + (self.means - m) ** 2)
        return float(np.sqrt(max(var, 0.0)))


def _component_logpdf(X: np.ndarray, gmm: Gmm) -> np.ndarray:
    return _weighted_logpdf(X, gmm.weights, gmm.means, gmm.covs)


def _weighted_logpdf(X, w, mu, cov) -> np.ndarray:
    d = mu.shape[1]
    out = np.empty((X.shape[0], len(w)))
    for j in range(len(w)):
        L = _chol(cov[j])
        z = solve_triangular(L, (X - mu[j]).T, lower=True, check_finite=False)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, j] = np.log(w[j]) - 0.5 * (d * np.log(2 * np.pi) + logdet + (z * z).sum(axis=0))
    return out


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eps = 1e-8 * max(np.trace(cov) / len(cov), 1e-12)
        warnings.warn("singular covariance regularized", RuntimeWarning, stacklevel=3)
        return np.linalg.cholesky(cov + eps * np.eye(len(cov)))


# --- fitting ---------------------------------------------------------------


def fit_em(
    samples: np.ndarray,
    n_components: int,
    max_iter: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
) -> Gmm:
    """Maximum-likelihood mixture by expectation-maximisation.

    Stops when the relative log-likelihood gain drops below ``tol`` or after
    ``max_iter`` iterations.  The per-iteration log-likelihoods are kept on
    the returned model as ``loglik_trace``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    N, d = X.shape
    if n_components < 1:
        raise GmmError("n_components must be at least 1")
    if N < 10 * d:
        raise GmmError(f"need at least {10 * d} samples for dimension {d}, got {N}")
    rng = np.random.default_rng(seed)
    if n_components == 1:
        mu = X.mean(axis=0)
        cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
        cov = _regularize(cov)
        g = Gmm(np.ones(1), mu[None], cov[None])
        return Gmm(g.weights, g.means, g.covs, (float(g.logpdf(X).sum()),))

    _, labels = kmeans2(X, n_components, minit="++", seed=rng)
    resp = np.zeros((N, n_components))
    resp[np.arange(N), labels] = 1.0
    trace = []
    prev = -np.inf
    w, mu, cov = None, None, None
    for _ in range(max_iter):
        w, mu, cov = _m_step(X, resp, rng)
        logp = _weighted_logpdf(X, w, mu, cov)
        ll_rows = logsumexp(logp, axis=1)
        ll = float(ll_rows.sum())
        trace.append(ll)
        resp = np.exp(logp - ll_rows[:, None])
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
    return Gmm(w, mu, cov, tuple(trace))


def _regularize(cov: np.ndarray) -> np.ndarray:
    d = len(cov)
    if np.linalg.eigvalsh(cov).min() <= 1e-12 * max(np.trace(cov), 1e-300):
        eps = 1e-8 * max(np.trace(cov) / d, 1e-12)
        warnings.warn("singular covariance regularized by eps*I", RuntimeWarning, stacklevel=3)
        cov = cov + eps * np.eye(d)
    return cov


def _m_step(X, resp, rng):
    N, d = X.shape
    nk = resp.sum(axis=0)
    for j in np.flatnonzero(nk < 1e-10 * N):
        # empty component: restart it on a random sample
        warnings.warn("empty mixture component reinitialized", RuntimeWarning, stacklevel=3)
        resp[:, j] = 0.0
        resp[rng.integers(N), j] = 1.0
        nk = resp.sum(axis=0)
    w = nk / N
    w = w / w.sum()
    mu = (resp.T @ X) / nk[:, None]
    cov = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = X - mu[j]
        c = (resp[:, j, None] * diff).T @ diff / nk[j]
        cov[j] = _regularize(0.5 * (c + c.T))
    return w, mu, cov


def n_parameters(n: int, d: int) -> int:
    return (n - 1) + n * d + n * d * (d + 1) // 2


def bic(gmm: Gmm, X: np.ndarray) -> float:
    X = np.atleast_2d(X)
    return -2.0 * float(gmm.logpdf(X).sum()) + n_parameters(gmm.n_components, gmm.dim) * np.log(X.shape[0])


def fit_auto(samples: np.ndarray, max_components: int = 5, seed: int = 0, **opts) -> Gmm:
    """Fit with the component count that minimises BIC over ``1..max_components``."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    best, best_bic = None, np.inf
    for n in range(1, max_components + 1):
        try:
            g = fit_em(X, n, seed=seed, **opts)
        except GmmError:
            break
        b = bic(g, X)
        log.debug("components=%d bic=%.3f", n, b)
        if b < best_bic - 1e-9:
            best, best_bic = g, b
    return best


def fit_independent_blocks(samples: np.ndarray, blocks, n_components=None, seed: int = 0) -> Gmm:
    """Product of mixtures fitted separately on coordinate blocks."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    parts = []
    for blk in blocks:
        sub = X[:, list(blk)]
        parts.append(fit_auto(sub, seed=seed) if n_components is None else fit_em(sub, n_components, seed=seed))
    d = X.shape[1]
    ws, mus, covs = [], [], []
    for combo in itertools.product(*[range(p.n_components) for p in parts]):
        w = 1.0
        mu = np.zeros(d)
        cov = np.zeros((d, d))
        for blk, p, j in zip(blocks, parts, combo):
            idx = list(blk)
            w *= p.weights[j]
            mu[idx] = p.means[j]
            cov[np.ix_(idx, idx)] = p.covs[j]
        ws.append(w); mus.append(mu); covs.append(cov)
    ws = np.array(ws)
    return Gmm(ws / ws.sum(), np.array(mus), np.array(covs))


# --- projection, CDF and quantiles -------------------------------------------


def project(gmm: Gmm, a: np.ndarray) -> UnivariateGmm:
    """Distribution of ``a @ e`` for ``e`` drawn from ``gmm``."""
    a = np.asarray(a, dtype=float).ravel()
    if a.shape != (gmm.dim,):
        raise GmmError(f"coefficient vector has length {a.size}, expected {gmm.dim}")
    means = gmm.means @ a
    var = np.einsum("k,jkl,l->j", a, gmm.covs, a)
    scale = 1e-12 * max(1.0, float(np.abs(a).max(initial=0.0)) ** 2)
    if np.any(var < -scale):
        raise GmmError("projected variance is negative (covariance not PSD)")
    return UnivariateGmm(gmm.weights, means, np.sqrt(np.maximum(var, 0.0)))


def _component_cdf(x, mu, sigma):
    x = np.asarray(x, dtype=float)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (x - mu) / np.where(sigma > 0, sigma, 1.0)
        out = np.where(sigma > 0, ndtr(z), (x >= mu).astype(float))
    return out


def cdf(u: UnivariateGmm, x):
    """Mixture CDF; point-mass components contribute a unit step at their mean."""
    val = _component_cdf(x, u.means, u.sigmas) @ u.weights
    return float(val) if np.ndim(val) == 0 else val


def pdf(u: UnivariateGmm, x):
    """Mixture density of the continuous components (point masses contribute 0 away from their atom)."""
    x = np.asarray(x, dtype=float)[..., None]
    s = np.where(u.sigmas > 0, u.sigmas, 1.0)
    dens = np.where(u.sigmas > 0, np.exp(-0.5 * ((x - u.means) / s) ** 2) / (s * np.sqrt(2 * np.pi)), 0.0)
    val = dens @ u.weights
    return float(val) if np.ndim(val) == 0 else val


def quantile(u: UnivariateGmm, alpha: float, tol: float = QUANTILE_TOL, max_iter: int = 200) -> float:
    """Smallest ``q`` with ``cdf(q) >= alpha``.

    Newton iteration on the CDF from a moment-matched Gaussian start, kept
    inside a bracket that is tightened on every step; bisection takes over
    when a Newton step leaves the bracket or the density vanishes.
    """
    if not 0.0 < alpha < 1.0:
        raise GmmError("alpha must lie in (0, 1)")
    w, mu, sig = u.weights, u.means, u.sigmas
    if np.all(sig == 0):
        order = np.argsort(mu, kind="stable")
        cum = np.cumsum(w[order])
        k = int(np.searchsorted(cum, alpha - 1e-15))
        return float(mu[order][min(k, len(cum) - 1)])
    lo = float(np.min(mu - 10 * sig))
    hi = float(np.max(mu + 10 * sig))
    span = max(hi - lo, 1e-12)
    while cdf(u, lo) >= alpha:
        lo -= span
        span *= 2
    while cdf(u, hi) < alpha:
        hi += span
        span *= 2
    q = u.mean() + ndtri(alpha) * u.std()
    if not lo < q < hi:
        q = 0.5 * (lo + hi)
    for _ in range(max_iter):
        F = cdf(u, q)
        err = F - alpha
        if abs(err) <= tol:
            return float(q)
        if err < 0:
            lo = q
        else:
            hi = q
        f = pdf(u, q)
        step_ok = f > 1e-300
        if step_ok:
            q_new = q - err / f
            step_ok = lo < q_new < hi
        q = q_new if step_ok else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    # jump in the CDF (atom) or flat tail: return the generalised inverse
    return float(hi if cdf(u, q) < alpha else q)


def sample(gmm: Gmm, n: int, seed=None) -> np.ndarray:
    """``n`` draws; ``seed`` may be an int or a ``numpy.random.Generator``."""
    if n < 1:
        raise GmmError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    out = np.empty((n, gmm.dim))
    for j in range(gmm.n_components):
        sel = comp == j
        if not sel.any():
            continue
        out[sel] = gmm.means[j] + z[sel] @ _sqrt_psd(gmm.covs[j]).T
    return out


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(1.0, vals.max()):
            warnings.warn("non-PSD covariance clipped before sampling", RuntimeWarning, stacklevel=3)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))
