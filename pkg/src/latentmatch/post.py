"""Densities, conditional expectations, moments, quantile summaries and HAC regressions."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .exceptions import (
    CollinearityError,
    DegenerateSampleError,
    InvalidDimensionError,
    InvalidInputError,
    InvalidParameterError,
)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _values(grid) -> np.ndarray:
    v = np.asarray(grid, dtype=float).ravel()
    if v.size == 0:
        raise InvalidDimensionError("empty grid")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("grid has non-finite values")
    return v


def silverman_bandwidth(values) -> float:
    """Rule-of-thumb bandwidth ``0.9 * min(sd, IQR / 1.34) * N**(-1/5)``.

    Falls back to whichever scale is positive when the other is zero.
    """
    v = _values(values)
    if v.size < 2:
        raise DegenerateSampleError("need at least two values")
    sd = float(np.std(v, ddof=1))
    q75, q25 = np.percentile(v, [75, 25])
    iqr = float(q75 - q25) / 1.34
    scales = [s for s in (sd, iqr) if s > 0]
    if not scales:
        raise DegenerateSampleError("constant sample has no spread")
    return 0.9 * min(scales) * v.size ** (-0.2)


@dataclass(frozen=True)
class DensityEstimate:
    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    kernel: str = "gaussian"

    def integral(self) -> float:
        return float(trapezoid(self.density, self.x))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,density\n")
            for a, b in zip(self.x, self.density):
                fh.write(f"{a:.17g},{b:.17g}\n")


def _log_kde(points, b, at):
    """Log of the Gaussian kernel density of ``points`` evaluated at ``at``."""
    at = np.asarray(at, dtype=float)
    flat = at.ravel()
    out = np.empty(flat.size)
    step = max(1, 2_000_000 // max(points.size, 1))
    for s in range(0, flat.size, step):
        z = (points[None, :] - flat[s:s + step, None]) / b
        out[s:s + step] = logsumexp(-0.5 * z * z, axis=1)
    return (out - np.log(points.size * b) - _LOG_SQRT_2PI).reshape(at.shape)


def kernel_density(grid, b: float | None = None, eval_points=None,
                   n_points: int = 512) -> DensityEstimate:
    """Gaussian kernel density of pseudo-observations.

    ``f(x) = 1 / (N b) * sum_i phi((x_i - x) / b)``. The bandwidth defaults
    to :func:`silverman_bandwidth`; evaluation points default to
    ``n_points`` equispaced values on ``[min - 5b, max + 5b]``.
    """
    v = _values(grid)
    b = silverman_bandwidth(v) if b is None else float(b)
    if not b > 0:
        raise InvalidParameterError("bandwidth must be positive")
    if eval_points is None:
        eval_points = np.linspace(v.min() - 5 * b, v.max() + 5 * b, n_points)
    x = np.asarray(eval_points, dtype=float).ravel()
    f = np.zeros(x.size)
    step = max(1, 2_000_000 // v.size)
    for s in range(0, x.size, step):
        z = (v[None, :] - x[s:s + step, None]) / b
        f[s:s + step] = np.exp(-0.5 * z * z).sum(axis=1)
    f /= v.size * b * np.sqrt(2.0 * np.pi)
    return DensityEstimate(x, f, b)


def _pick_complement(A, k, c_columns):
    T, K = A.shape
    if c_columns is not None:
        cols = tuple(int(c) for c in c_columns)
        if k in cols or len(cols) != T:
            raise InvalidParameterError("c_columns must be T columns other than k")
        if np.linalg.matrix_rank(A[:, cols]) < T:
            raise InvalidParameterError("selected complement block is singular")
        return cols
    others = [j for j in range(K) if j != k]
    for cols in itertools.combinations(others, T):
        C = A[:, cols]
        if np.linalg.cond(C) < 1e10:
            return cols
    raise InvalidParameterError(f"no invertible {T}x{T} block among columns other than {k}")


def conditional_expectation(A, grids, y, k: int = 0, bandwidths=None, log_densities=None,
                            sigmas=None, c_columns=None, seed: int = 0) -> float:
    """Posterior mean of factor ``k`` given an outcome vector ``y``.

    Columns of ``A`` split into an invertible ``T x T`` block ``C`` (not
    containing ``k``) and the rest ``B``. With pseudo-draws ``x_B`` of the
    B-factors, each draw is weighted by the density of the implied
    C-factors ``C^{-1} (y - B x_B)``, a product of per-factor kernel
    densities, and the weighted average of the draws of factor ``k`` is
    returned. The draws already sample the B-factors, so their density does
    not enter the weights. Weights are accumulated in logs.

    Parameters
    ----------
    A : array-like of shape (T, K)
    grids : sequence of K arrays of length N
    y : array-like of shape (T,)
    k : int
    bandwidths : sequence of K floats, optional
        Kernel bandwidths; Silverman's rule per grid by default.
    log_densities : sequence of K callables, optional
        Replace the kernel log densities.
    sigmas : sequence of K permutations, optional
        Pairing of the B-factor draws; independent random permutations by
        default (the identity when B has a single factor).
    c_columns : sequence of T ints, optional
    seed : int
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    T, K = A.shape
    y = np.asarray(y, dtype=float).ravel()
    if y.size != T:
        raise InvalidDimensionError("y must have T entries")
    grids = [_values(g) for g in grids]
    if len(grids) != K:
        raise InvalidDimensionError("one grid per factor required")
    N = grids[0].size
    cols = _pick_complement(A, k, c_columns)
    bcols = [j for j in range(K) if j not in cols]
    if log_densities is None:
        bw = [silverman_bandwidth(g) for g in grids] if bandwidths is None else list(bandwidths)

        def logf(j, v):
            return _log_kde(grids[j], bw[j], v)
    else:
        def logf(j, v):
            return np.asarray(log_densities[j](v), dtype=float)
    if sigmas is None:
        if len(bcols) == 1:
            sigmas = [np.arange(N)] * K
        else:
            rng = np.random.default_rng(seed)
            sigmas = [rng.permutation(N) for _ in range(K)]
    XB = np.column_stack([grids[j][np.asarray(sigmas[j])] for j in bcols])
    resid = y[None, :] - XB @ A[:, bcols].T
    XC = np.linalg.solve(A[:, cols], resid.T).T
    logw = np.zeros(N)
    for pos, j in enumerate(cols):
        logw += logf(j, XC[:, pos])
    xk = XB[:, bcols.index(k)]
    if not np.any(np.isfinite(logw)):
        warnings.warn("all conditional weights vanish; returning the unweighted mean",
                      RuntimeWarning, stacklevel=2)
        return float(np.mean(xk))
    w = np.exp(logw - logsumexp(logw))
    # clip guards against rounding outside the convex hull
    return float(np.clip(np.sum(w * xk), xk.min(), xk.max()))


def conditional_means(A, grids, Y, k: int = 0, **kwargs) -> np.ndarray:
    """:func:`conditional_expectation` for every row of ``Y``."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return np.array([conditional_expectation(A, grids, row, k, **kwargs) for row in Y])


def constrained_predictor(posterior_means, grid) -> np.ndarray:
    """Grid values rearranged to follow the ranking of ``posterior_means``.

    This minimizes the squared distance to the posterior means among all
    permutations of the grid (ties keep index order).
    """
    pm = np.asarray(posterior_means, dtype=float).ravel()
    g = np.asarray(grid, dtype=float).ravel()
    if pm.size != g.size:
        raise InvalidDimensionError("posterior_means and grid differ in length")
    out = np.empty_like(g)
    out[np.argsort(pm, kind="stable")] = np.sort(g, kind="stable")
    return out


def moment(h, grid) -> float:
    """Plug-in estimate ``mean(h(x_i))``."""
    v = _values(grid)
    return float(np.mean(h(v)))


def cross_moment(h, grids, A, t: int, k: int, sigmas=None, seed: int = 0) -> float:
    """Estimate of ``E h(X_k, Y_t)`` from pseudo-draws paired by random permutations."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    grids = [_values(g) for g in grids]
    N = grids[0].size
    if sigmas is None:
        rng = np.random.default_rng(seed)
        sigmas = [rng.permutation(N) for _ in grids]
    draws = np.column_stack([g[np.asarray(s)] for g, s in zip(grids, sigmas)])
    yt = draws @ A[t]
    return float(np.mean(h(draws[:, k], yt)))


@dataclass(frozen=True)
class SummaryStats:
    p10: float
    p50: float
    p90: float

    @property
    def dispersion(self) -> float:
        return self.p90 - self.p10

    @property
    def upper(self) -> float:
        return self.p90 - self.p50

    @property
    def lower(self) -> float:
        return self.p50 - self.p10

    @property
    def bowley_kelley(self) -> float:
        return (self.upper - self.lower) / self.dispersion

    def as_dict(self) -> dict:
        return {
            "p10": self.p10, "p50": self.p50, "p90": self.p90,
            "dispersion": self.dispersion, "upper": self.upper, "lower": self.lower,
            "bowley_kelley": self.bowley_kelley,
        }


def empirical_quantile(values, p):
    """Linear interpolation of order statistics at position ``p * (N + 1)``,
    clamped to the sample range."""
    return np.quantile(np.asarray(values, dtype=float), p, method="weibull")


def dispersion_skewness(values) -> SummaryStats:
    """P90 - P10 dispersion and Bowley-Kelley skewness of a sample or grid."""
    v = _values(values)
    if v.size < 10:
        raise InvalidDimensionError("need at least 10 values")
    p10, p50, p90 = (float(q) for q in empirical_quantile(v, [0.1, 0.5, 0.9]))
    if not p90 > p10:
        raise DegenerateSampleError("zero dispersion; skewness undefined")
    return SummaryStats(p10, p50, p90)


@dataclass(frozen=True)
class OLSResult:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    lags: int

    @property
    def tstat(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se


def newey_west_ols(y, X, lags: int = 1) -> OLSResult:
    """OLS with Bartlett-kernel HAC covariance (no small-sample correction).

    Parameters
    ----------
    y : array-like of shape (n,)
    X : array-like of shape (n, p)
        Include the intercept (and trend) columns explicitly.
    lags : int
        Truncation lag; ``0`` gives White's heteroskedasticity-robust errors.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.size != n:
        raise InvalidDimensionError("y and X have different numbers of rows")
    if n < p + 2:
        raise InvalidDimensionError("need at least p + 2 observations")
    if lags < 0:
        raise InvalidParameterError("lags must be nonnegative")
    if np.linalg.matrix_rank(X) < p:
        raise CollinearityError("design matrix is rank deficient", columns=range(p))
    XtX_inv = np.linalg.inv(X.T @ X)
    coef = XtX_inv @ (X.T @ y)
    e = y - X @ coef
    u = X * e[:, None]
    S = u.T @ u
    for lag in range(1, min(lags, n - 1) + 1):
        w = 1.0 - lag / (lags + 1.0)
        G = u[lag:].T @ u[:-lag]
        S += w * (G + G.T)
    cov = XtX_inv @ S @ XtX_inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return OLSResult(coef, se, cov, e, int(lags))


def cyclicality_regression(stat, macro, lags: int = 1, trend: bool = True) -> OLSResult:
    """Regress a yearly statistic on a macro series, an intercept and a linear trend."""
    stat = np.asarray(stat, dtype=float).ravel()
    macro = np.asarray(macro, dtype=float).ravel()
    if stat.size != macro.size:
        raise InvalidDimensionError("stat and macro series differ in length")
    cols = [np.ones(stat.size), macro]
    if trend:
        cols.append(np.arange(stat.size, dtype=float))
    return newey_west_ols(stat, np.column_stack(cols), lags)
