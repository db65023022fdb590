"""Matching estimators for finite mixtures, heteroskedastic deconvolution and random trends."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assignment import match
from .estimator import FitOptions, _as_panel, _stream, alternate, starting_grids
from .exceptions import InvalidDimensionError, InvalidInputError, InvalidParameterError
from .model import ModelSpec, ShapeConstraints, preset_constraints
from .shape_ls import bounded_isotonic_fit

__all__ = [
    "MixtureFit",
    "HeteroFit",
    "TrendsFit",
    "mixture_gates",
    "fit_mixture",
    "fit_heteroskedastic",
    "fit_random_trends",
]


def mixture_gates(V, mu) -> np.ndarray:
    """Group indicators from the threshold-crossing representation.

    Group ``g`` (0-based) is selected when ``mu[g-1] < V <= mu[g]`` with
    ``mu[-1] = 0`` and ``mu[G-1] = 1``. Returns an array of shape (len(V), G).
    """
    V = np.asarray(V, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if np.any(np.diff(mu) < 0) or np.any(mu < 0) or np.any(mu > 1):
        raise InvalidParameterError("thresholds must be nondecreasing in [0, 1]")
    edges = np.concatenate([[-np.inf], mu, [np.inf]])
    G = mu.size + 1
    out = np.zeros((V.size, G))
    for g in range(G):
        out[:, g] = (V > edges[g]) & (V <= edges[g + 1])
    return out


@dataclass
class MixtureFit:
    """Best grid-search fit; components are ordered by increasing mean.

    ``grids[g][t]`` is the sorted grid of measurement ``t`` in component ``g``.
    """

    thresholds: np.ndarray
    grids: list
    objective: float
    candidates: np.ndarray
    candidate_objectives: np.ndarray
    objective_trace: np.ndarray = field(repr=False, default=None)

    @property
    def probabilities(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.thresholds, [1.0]]))

    @property
    def component_means(self) -> np.ndarray:
        return np.array([np.mean([np.mean(g) for g in comp]) for comp in self.grids])

    def to_csv(self, path) -> None:
        G, T = len(self.grids), len(self.grids[0])
        N = len(self.grids[0][0])
        with open(path, "w") as fh:
            fh.write("# thresholds=" + ";".join(f"{m:.17g}" for m in self.thresholds)
                     + " probabilities=" + ";".join(f"{p:.17g}" for p in self.probabilities)
                     + f" objective={self.objective:.17g}\n")
            fh.write("rank," + ",".join(f"g{g + 1}_t{t + 1}" for g in range(G) for t in range(T)) + "\n")
            for i in range(N):
                vals = [self.grids[g][t][i] for g in range(G) for t in range(T)]
                fh.write(f"{i + 1}," + ",".join(f"{v:.17g}" for v in vals) + "\n")


def _mu_candidates(G, mu_grid, n_grid):
    if mu_grid is None:
        if G != 2:
            raise InvalidParameterError("a default threshold grid exists only for G = 2")
        return (np.arange(1, n_grid + 1) / (n_grid + 1))[:, None]
    cand = np.atleast_2d(np.asarray(mu_grid, dtype=float))
    if cand.shape[0] == 1 and G == 2 and cand.shape[1] != 1:
        cand = cand.T
    if cand.size == 0:
        raise InvalidParameterError("empty threshold grid")
    if cand.shape[1] != G - 1:
        raise InvalidDimensionError(f"each candidate needs {G - 1} thresholds")
    return cand


def _order_components(grids, mu):
    """Sort components by mean and rebuild thresholds from the reordered probabilities."""
    probs = np.diff(np.concatenate([[0.0], mu, [1.0]]))
    means = np.array([np.mean([np.mean(g) for g in comp]) for comp in grids])
    order = np.argsort(means, kind="stable")
    probs = probs[order]
    return [grids[g] for g in order], np.cumsum(probs)[:-1]


def fit_mixture(Y, G: int = 2, mu_grid=None, n_grid: int = 10, R: int = 10,
                constraints: ShapeConstraints | None = None,
                options: FitOptions | None = None) -> MixtureFit:
    """Finite mixture of ``G`` components with independent measurements.

    ``Y[:, t] = sum_g Z_g X_{g,t}`` with group indicators ``Z_g`` generated by
    uniform draws ``V`` and thresholds ``mu``. For every threshold candidate
    the alternating algorithm is run on ``R * N`` simulated predictions (each
    outcome matched to exactly ``R`` of them) with ``options.n_starts``
    starting values; the candidate with the smallest objective wins. The
    uniform draws, permutations and starting values are shared by all
    candidates, so the result does not depend on the candidate order.

    Parameters
    ----------
    Y : array-like of shape (N, T), T >= 2
    G : int
    mu_grid : array-like of shape (n_candidates, G - 1), optional
        Defaults to ``n_grid`` equidistant first-group probabilities
        ``k / (n_grid + 1)`` (G = 2 only).
    R : int
        Simulated predictions per observation.
    constraints : ShapeConstraints, optional
        Weak preset without zero-mean restrictions by default.
    options : FitOptions, optional
    """
    Y = _as_panel(Y)
    N, T = Y.shape
    if G < 2:
        raise InvalidParameterError("need at least two components")
    if T < 2:
        raise InvalidDimensionError("mixtures need T >= 2 repeated measurements")
    if G > N:
        raise InvalidDimensionError("more components than observations")
    if R < 1:
        raise InvalidParameterError("R must be >= 1")
    options = options or FitOptions(n_starts=3)
    cands = _mu_candidates(G, mu_grid, n_grid)
    K = G * T
    c = constraints if constraints is not None else preset_constraints("weak")
    c = c.with_zero_mean([False] * K)
    A = np.zeros((T, K))
    for g in range(G):
        A[np.arange(T), g * T + np.arange(T)] = 1.0
    spec = ModelSpec(A, c)

    rng = _stream(options.seed, 5)
    V = rng.random(N * R)
    maps = np.array([np.concatenate([rng.permutation(N) for _ in range(R)]) for _ in range(K)])
    scales = np.std(Y, axis=0, ddof=1)[np.tile(np.arange(T), G)]
    starts = [starting_grids(_stream(options.seed, 6, s), N, spec, scales, options)
              for s in range(options.n_starts)]
    zm = (False,) * K
    frozen = (False,) * K

    results = []
    for mu in cands:
        gz = mixture_gates(V, mu)
        gates = np.repeat(gz, T, axis=1)
        best = None
        for init in starts:
            out = alternate(Y, A, maps, c, [g.copy() for g in init], zm, frozen, options,
                            gates=gates, capacity=R)
            if best is None or out[0] < best[0]:
                best = out
        results.append(best)
    objs = np.array([r[0] for r in results])
    j = int(np.argmin(objs))
    obj, grids, _, trace, _, _ = results[j]
    comp = [[np.asarray(grids[g * T + t]) for t in range(T)] for g in range(G)]
    comp, mu = _order_components(comp, cands[j])
    return MixtureFit(np.asarray(mu, dtype=float), comp, float(obj), cands, objs, trace)


@dataclass
class HeteroFit:
    x1: np.ndarray
    S: np.ndarray
    lam: float
    outcome_term: float
    penalty_term: float
    objective_trace: np.ndarray = field(repr=False, default=None)
    iterations: int = 0

    @property
    def objective(self) -> float:
        return self.outcome_term + self.lam * self.penalty_term

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("rank,x1,S\n")
            for i, (a, b) in enumerate(zip(self.x1, self.S)):
                fh.write(f"{i + 1},{a:.17g},{b:.17g}\n")


def _hetero_terms(y, s_tilde, x1, S, e, pi):
    r = y[pi] - x1 - S * e
    d = s_tilde[pi] - S
    return float(r @ r), float(d @ d)


def fit_heteroskedastic(y, s_tilde, x2_draws, lam: float = 10.0,
                        constraints: ShapeConstraints | None = None, s_bounds=None,
                        zero_mean: bool = False, options: FitOptions | None = None,
                        sigma=None) -> HeteroFit:
    """Deconvolution with unit-specific noise scales ``Y = X1 + S X2``.

    Minimizes ``sum (Y[pi] - X1 - S * X2[sigma])**2 + lam * sum (S~[pi] - S)**2``
    by alternating a two-dimensional matching of ``(Y, sqrt(lam) S~)`` against
    ``(X1 + S X2[sigma], sqrt(lam) S)`` with an exact update of ``X1``
    (constrained grid) and ``S`` (box-constrained, closed form per unit).

    Parameters
    ----------
    y, s_tilde : array-like of shape (N,)
        Outcomes and positive noise-scale estimates.
    x2_draws : array-like of shape (N,)
        Draws from the known standardized noise distribution.
    lam : float
    constraints : ShapeConstraints, optional
        Weak preset by default.
    s_bounds : (float, float), optional
        Box for ``S``; defaults to ``[min(S~) / 2, 2 max(S~)]``.
    zero_mean : bool
        Restrict the mean of ``X1`` to zero.
    options : FitOptions, optional
    sigma : permutation, optional
    """
    y = np.asarray(y, dtype=float).ravel()
    s_tilde = np.asarray(s_tilde, dtype=float).ravel()
    x2 = np.asarray(x2_draws, dtype=float).ravel()
    N = y.size
    if s_tilde.size != N or x2.size != N:
        raise InvalidDimensionError("y, s_tilde and x2_draws must have equal length")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x2)):
        raise InvalidInputError("non-finite data")
    if not np.all(s_tilde > 0):
        raise InvalidInputError("s_tilde must be positive")
    if not lam > 0:
        raise InvalidParameterError("lam must be positive")
    options = options or FitOptions()
    c = constraints if constraints is not None else preset_constraints("weak")
    lo, hi = s_bounds if s_bounds is not None else (0.5 * s_tilde.min(), 2.0 * s_tilde.max())
    if not 0 < lo <= hi:
        raise InvalidParameterError("invalid bounds for S")
    rng = _stream(options.seed, 7)
    sigma = rng.permutation(N) if sigma is None else np.asarray(sigma)
    e = x2[sigma]
    sq = np.sqrt(lam)
    data = np.column_stack([y, sq * s_tilde])

    # start: noise-free fit and the observed scales in sorted-outcome order
    order = np.argsort(y, kind="stable")
    x1 = bounded_isotonic_fit(y[order] - (y.mean() if zero_mean else 0.0), None, c, zero_mean)
    S = np.clip(s_tilde[order], lo, hi)

    def matched(x1, S):
        return match(np.column_stack([x1 + S * e, sq * S]), data)

    asg = matched(x1, S)
    trace = [asg.cost]
    best = (asg.cost, x1, S, asg.pi)
    it = 0
    while it < options.max_iter:
        ym, sm = y[asg.pi], s_tilde[asg.pi]
        prev = np.inf
        for _ in range(options.max_sweeps):
            x1 = bounded_isotonic_fit(ym - S * e, None, c, zero_mean)
            r = ym - x1
            S = np.clip((r * e + lam * sm) / (e * e + lam), lo, hi)
            out, pen = _hetero_terms(y, s_tilde, x1, S, e, asg.pi)
            cur = out + lam * pen
            if prev - cur <= options.sweep_rtol * max(cur, 1e-300):
                break
            prev = cur
        it += 1
        asg = matched(x1, S)
        trace.append(asg.cost)
        if asg.cost < best[0]:
            best = (asg.cost, x1, S, asg.pi)
        if trace[-2] - trace[-1] < options.tol:
            break
    _, x1, S, pi = best
    out, pen = _hetero_terms(y, s_tilde, x1, S, e, pi)
    return HeteroFit(x1, S, float(lam), out, pen, np.array(trace), it)


@dataclass
class TrendsFit:
    """Unit coefficient pairs (an unordered cloud) and noise grids per period."""

    alpha: np.ndarray
    beta: np.ndarray
    eps_grids: list
    objective: float
    objective_trace: np.ndarray = field(repr=False, default=None)

    @property
    def coefficients(self) -> np.ndarray:
        return np.column_stack([self.alpha, self.beta])


def _trend_objective(Ym, alpha, beta, eps, sigmas, tt):
    pred = alpha[:, None] + beta[:, None] * tt[None, :]
    pred = pred + np.column_stack([eps[t][sigmas[t]] for t in range(tt.size)])
    d = Ym - pred
    return float(np.sum(d * d))


def fit_random_trends(Y, constraints: ShapeConstraints | None = None,
                      options: FitOptions | None = None, sigmas=None) -> TrendsFit:
    """Random trends ``Y[i, t] = alpha_i + beta_i * t + eps_{i, t}`` with ``t = 1..T``.

    The update step alternates unit-level OLS for ``(alpha_i, beta_i)`` with
    zero-mean constrained grids for each period's noise.
    """
    Y = _as_panel(Y)
    N, T = Y.shape
    if T < 3:
        raise InvalidDimensionError("random trends need T >= 3")
    options = options or FitOptions()
    c = constraints if constraints is not None else preset_constraints("weak")
    rng = _stream(options.seed, 8)
    if sigmas is None:
        sigmas = [rng.permutation(N) for _ in range(T)]
    sigmas = [np.asarray(s) for s in sigmas]
    tt = np.arange(1, T + 1, dtype=float)
    D = np.column_stack([np.ones(T), tt])
    H = np.linalg.solve(D.T @ D, D.T)

    coef = Y @ H.T
    alpha, beta = coef[:, 0].copy(), coef[:, 1].copy()
    eps = [np.zeros(N) for _ in range(T)]
    inv = [np.argsort(s) for s in sigmas]

    def matched():
        pred = alpha[:, None] + beta[:, None] * tt[None, :]
        pred = pred + np.column_stack([eps[t][sigmas[t]] for t in range(T)])
        return match(pred, Y)

    asg = matched()
    trace = [asg.cost]
    best = (asg.cost, alpha.copy(), beta.copy(), [e.copy() for e in eps])
    it = 0
    while it < options.max_iter:
        Ym = Y[asg.pi]
        prev = np.inf
        for _ in range(options.max_sweeps):
            E = np.column_stack([eps[t][sigmas[t]] for t in range(T)])
            coef = (Ym - E) @ H.T
            alpha, beta = coef[:, 0], coef[:, 1]
            R = Ym - alpha[:, None] - beta[:, None] * tt[None, :]
            eps = [bounded_isotonic_fit(R[inv[t], t], None, c, True) for t in range(T)]
            cur = _trend_objective(Ym, alpha, beta, eps, sigmas, tt)
            if prev - cur <= options.sweep_rtol * max(cur, 1e-300):
                break
            prev = cur
        it += 1
        asg = matched()
        trace.append(asg.cost)
        if asg.cost < best[0]:
            best = (asg.cost, alpha.copy(), beta.copy(), [e.copy() for e in eps])
        if trace[-2] - trace[-1] < options.tol:
            break
    obj, alpha, beta, eps = best
    return TrendsFit(alpha, beta, eps, float(obj), np.array(trace))
