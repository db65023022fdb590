"""Alternating matching / update estimator, multi-start and sigma averaging."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .assignment import Assignment, match, match_with_capacity, sort_match
from .exceptions import InvalidDimensionError, InvalidInputError, InvalidParameterError
from .model import (
    ModelSpec,
    check_identification,
    deconvolution_spec,
    default_constraints,
    fixed_effects_spec,
    preset_constraints,
)
from .shape_ls import QuantileGrid, WarmState, bounded_isotonic_fit, predictions, update_step

__all__ = [
    "FitOptions",
    "EstimationResult",
    "AveragedResult",
    "wasserstein_objective",
    "draw_sigmas",
    "starting_grids",
    "fit",
    "fit_averaged",
    "data_scaled_spec",
    "mallows_fit",
    "MatchingEstimator",
]


@dataclass(frozen=True)
class FitOptions:
    """Settings of the alternating algorithm.

    Parameters
    ----------
    max_iter : int
        Maximum number of update steps.
    tol : float
        Stop once a full iteration lowers the objective by less than ``tol``.
    n_starts : int
        Random starting values per sigma draw; the best objective is kept.
    n_draws : int
        Number ``M`` of independent permutation draws averaged over.
    seed : int
        Master seed. Every (draw, start) task gets its own stream.
    start_components, start_spread : int, float
        Starting grids are sorted samples from an equal-weight mixture of
        ``start_components`` normals with standard deviation ``sigma_hat`` and
        means uniform on ``[-start_spread, start_spread] * sigma_hat``.
    max_sweeps, sweep_rtol : int, float
        Block-coordinate descent controls of the update step.
    """

    max_iter: int = 200
    tol: float = 1e-8
    n_starts: int = 1
    n_draws: int = 1
    seed: int = 0
    start_components: int = 5
    start_spread: float = 5.0
    max_sweeps: int = 500
    sweep_rtol: float = 1e-9

    def __post_init__(self):
        if self.max_iter < 1 or self.n_starts < 1 or self.n_draws < 1:
            raise InvalidParameterError("max_iter, n_starts and n_draws must be >= 1")
        if not self.tol >= 0:
            raise InvalidParameterError("tol must be nonnegative")
        if self.start_components < 1 or not self.start_spread >= 0:
            raise InvalidParameterError("invalid starting-value distribution")
        if self.seed < 0:
            raise InvalidParameterError("seed must be nonnegative")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for task ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed for sub-task ``key`` of ``seed``."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(2)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


@dataclass
class EstimationResult:
    """Output of one run of the alternating algorithm."""

    grids: list
    objective: float
    objective_trace: np.ndarray
    assignment: Assignment
    iterations: int
    converged: bool
    sigmas: list = field(repr=False)
    start_id: int = 0
    sigma_seed: int = 0
    labels: tuple = ()
    start_objectives: np.ndarray = field(default=None, repr=False)

    def grid(self, k: int = 0) -> QuantileGrid:
        return QuantileGrid(self.grids[k], k)

    def to_csv(self, path) -> None:
        write_grids_csv(path, self.grids, self.labels)


@dataclass
class AveragedResult:
    """Grids averaged elementwise over ``M`` permutation draws."""

    grids: list
    draws: list
    seed: int
    labels: tuple = ()

    @property
    def objectives(self) -> np.ndarray:
        return np.array([d.objective for d in self.draws])

    @property
    def start_objectives(self) -> np.ndarray:
        """Array of shape (M, n_starts) with the final objective of every start."""
        return np.vstack([d.start_objectives for d in self.draws])

    def grid(self, k: int = 0) -> QuantileGrid:
        return QuantileGrid(self.grids[k], k)

    def to_csv(self, path) -> None:
        write_grids_csv(path, self.grids, self.labels)


def write_grids_csv(path, grids, labels=()) -> None:
    """Write grids as ``rank,<label>...`` rows with round-trip precision."""
    K = len(grids)
    labels = tuple(labels) or tuple(f"X{k + 1}" for k in range(K))
    n = len(grids[0])
    with open(path, "w", newline="") as fh:
        fh.write("rank," + ",".join(labels) + "\n")
        for i in range(n):
            fh.write(str(i + 1) + "," + ",".join(f"{float(g[i]):.17g}" for g in grids) + "\n")


def read_grids_csv(path) -> tuple[list, tuple]:
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    names = data.dtype.names[1:]
    return [np.asarray(data[nm], dtype=float) for nm in names], tuple(names)


def _as_panel(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2:
        raise InvalidDimensionError("Y must be 1-D or 2-D")
    if not np.all(np.isfinite(Y)):
        raise InvalidInputError("Y has non-finite entries")
    return Y


def wasserstein_objective(Y, grids, A, sigmas) -> float:
    """Squared empirical Wasserstein distance between ``Y`` and model predictions.

    Predictions are ``Z[i, t] = sum_k A[t, k] grids[k][sigmas[k][i]]``; the
    result is the optimal total squared distance over all matchings.
    """
    Y = _as_panel(Y)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != Y.shape[1] or len(grids) != A.shape[1] or len(sigmas) != A.shape[1]:
        raise InvalidDimensionError("Y, A, grids and sigmas are inconsistent")
    for g, s in zip(grids, sigmas):
        if len(g) != Y.shape[0] or len(s) != Y.shape[0]:
            raise InvalidDimensionError("grids and permutations must have length N")
    Z = predictions(grids, A, sigmas)
    return match(Z, Y).cost


def draw_sigmas(rng: np.random.Generator, N: int, K: int) -> list:
    """``K`` independent uniform random permutations of ``range(N)``."""
    return [rng.permutation(N) for _ in range(K)]


def factor_scales(Y, spec: ModelSpec, frozen_grids=None, floor: float = 1e-3) -> np.ndarray:
    """Standard deviations of the factors by covariance minimum distance.

    Contributions of frozen factors (known samples) are netted out before
    solving for the free variances.
    """
    Y = _as_panel(Y)
    A = spec.loading
    cov = np.atleast_2d(np.cov(Y, rowvar=False))
    outer = np.column_stack([np.outer(A[:, k], A[:, k]).ravel() for k in range(spec.K)])
    target = cov.ravel().copy()
    var = np.zeros(spec.K)
    free = []
    for k in range(spec.K):
        if spec.frozen[k] and frozen_grids is not None and frozen_grids[k] is not None:
            var[k] = float(np.var(frozen_grids[k], ddof=1))
            target -= outer[:, k] * var[k]
        else:
            free.append(k)
    if free:
        v, *_ = np.linalg.lstsq(outer[:, free], target, rcond=None)
        var[free] = v
    scale = max(float(np.mean(np.diag(cov))), np.finfo(float).tiny)
    return np.sqrt(np.maximum(var, floor * scale))


def starting_grids(rng: np.random.Generator, N: int, spec: ModelSpec, scales,
                   options: FitOptions | None = None, frozen_grids=None) -> list:
    """Random feasible starting grids for the free factors.

    Each grid is a sorted sample of size ``N`` from a dispersed mixture of
    normals, projected onto the constraint set.
    """
    options = options or FitOptions()
    zm = spec.zero_mean_flags()
    out = []
    for k in range(spec.K):
        if spec.frozen[k]:
            out.append(np.asarray(frozen_grids[k], dtype=float))
            continue
        s = float(scales[k])
        means = rng.uniform(-options.start_spread * s, options.start_spread * s,
                            size=options.start_components)
        comp = rng.integers(options.start_components, size=N)
        draw = np.sort(means[comp] + s * rng.standard_normal(N))
        if zm[k]:
            draw -= draw.mean()
        out.append(bounded_isotonic_fit(draw, None, spec.constraints, zm[k]))
    return out


def data_scaled_spec(spec: ModelSpec, Y, frozen_grids=None, c: float = 2.0) -> ModelSpec:
    """Replace the constraints of ``spec`` by :func:`default_constraints` at the
    average estimated standard deviation of the free factors."""
    Y = _as_panel(Y)
    frozen = _frozen_list(spec, Y.shape[0], frozen_grids)
    scales = factor_scales(Y, spec, frozen)
    free = [s for s, f in zip(scales, spec.frozen) if not f]
    zm = tuple(spec.constraints.zero_mean_for(k) for k in range(spec.K))
    cons = default_constraints(float(np.mean(free)), c).with_zero_mean(zm)
    return replace(spec, constraints=cons)


def _frozen_list(spec: ModelSpec, N: int, frozen_grids):
    if frozen_grids is None:
        frozen_grids = {}
    if isinstance(frozen_grids, dict):
        frozen_grids = [frozen_grids.get(k) for k in range(spec.K)]
    frozen_grids = list(frozen_grids)
    if len(frozen_grids) != spec.K:
        raise InvalidDimensionError("frozen_grids needs one entry per factor")
    out = []
    for k in range(spec.K):
        g = frozen_grids[k]
        if spec.frozen[k]:
            if g is None:
                raise InvalidInputError(f"factor {spec.labels[k]} is frozen but no grid was given")
            g = np.sort(np.asarray(g, dtype=float).ravel())
            if g.size != N:
                raise InvalidDimensionError("frozen grids must have length N")
            if not np.all(np.isfinite(g)):
                raise InvalidInputError("frozen grid has non-finite entries")
        out.append(g)
    return out


def fit(Y, spec: ModelSpec, options: FitOptions | None = None, sigmas=None, init=None,
        frozen_grids=None, start_id: int = 0, sigma_seed: int = 0) -> EstimationResult:
    """Run the alternating algorithm from one starting value.

    Parameters
    ----------
    Y : array-like of shape (N, T)
    spec : ModelSpec
    options : FitOptions, optional
    sigmas : sequence of K permutations, optional
        Drawn from ``options.seed`` when omitted.
    init : sequence of K arrays, optional
        Starting grids. Drawn at random when omitted; projected onto the
        constraint set either way.
    frozen_grids : sequence or dict, optional
        Observed samples for factors flagged as frozen in ``spec``.

    Returns
    -------
    EstimationResult
        ``objective`` is the optimal matching cost at the returned grids and
        ``objective_trace`` holds that cost after each update step.
    """
    options = options or FitOptions()
    Y = _as_panel(Y)
    N, T = Y.shape
    A = spec.loading
    K = spec.K
    if T != spec.T:
        raise InvalidDimensionError(f"Y has {T} columns but the loading has {spec.T} rows")
    if N < K + 1:
        raise InvalidDimensionError("need N >= K + 1 observations")
    free_cols = [k for k in range(K) if not spec.frozen[k]]
    # known (frozen) factors need no identification
    if free_cols and not check_identification(A[:, free_cols]):
        warnings.warn("loading matrix fails the identification check", stacklevel=2)
    frozen = _frozen_list(spec, N, frozen_grids)
    if sigmas is None:
        sigmas = draw_sigmas(_stream(options.seed, 0, sigma_seed), N, K)
    sigmas = [np.asarray(s, dtype=np.intp) for s in sigmas]
    if len(sigmas) != K or any(np.sort(s).tolist() != list(range(N)) for s in sigmas):
        raise InvalidInputError("sigmas must be K permutations of range(N)")
    zm = spec.zero_mean_flags()
    c = spec.constraints
    if init is None:
        rng = _stream(options.seed, 1, sigma_seed, start_id)
        grids = starting_grids(rng, N, spec, factor_scales(Y, spec, frozen), options, frozen)
    else:
        grids = []
        for k in range(K):
            if spec.frozen[k]:
                grids.append(frozen[k])
            else:
                g = np.sort(np.asarray(init[k], dtype=float).ravel())
                if g.size != N:
                    raise InvalidDimensionError("initial grids must have length N")
                grids.append(bounded_isotonic_fit(g, None, c, zm[k]))

    obj, grids, asg, trace, it, converged = alternate(
        Y, A, sigmas, c, grids, zm, spec.frozen, options)
    return EstimationResult(
        grids=[np.array(g) for g in grids],
        objective=float(obj),
        objective_trace=trace,
        assignment=asg,
        iterations=it,
        converged=converged,
        sigmas=sigmas,
        start_id=start_id,
        sigma_seed=sigma_seed,
        labels=spec.labels,
    )


def alternate(Y, A, maps, constraints, grids, zero_mean, frozen, options: FitOptions,
              gates=None, capacity: int = 1):
    """Core loop: match predictions to ``Y``, refit grids, repeat.

    ``maps`` and ``gates`` describe ``P = capacity * N`` predictions; each
    outcome is matched to exactly ``capacity`` of them. Returns the best
    iterate as ``(objective, grids, assignment, trace, iterations, converged)``;
    the trace holds the matched objective before the first update and after
    every update.
    """
    prices = np.full(capacity * Y.shape[0], np.nan)

    def matched(gr):
        Z = predictions(gr, A, maps, gates)
        return match(Z, Y) if capacity == 1 else match_with_capacity(Z, Y, capacity, prices)

    active = WarmState()
    asg = matched(grids)
    trace = [asg.cost]
    best = (asg.cost, grids, asg)
    converged = False
    it = 0
    while it < options.max_iter:
        grids, _ = update_step(Y[asg.pi], A, maps, constraints, grids, frozen=frozen, gates=gates,
                               zero_mean=zero_mean, max_sweeps=options.max_sweeps,
                               rtol=options.sweep_rtol, active=active)
        it += 1
        asg = matched(grids)
        trace.append(asg.cost)
        if asg.cost < best[0]:
            best = (asg.cost, grids, asg)
        if trace[-2] - trace[-1] < options.tol:
            converged = True
            break
    return best[0], best[1], best[2], np.array(trace), it, converged


def _best_of_starts(Y, spec, options, draw, frozen):
    N = _as_panel(Y).shape[0]
    sigmas = draw_sigmas(_stream(options.seed, 0, draw), N, spec.K)
    results = [
        fit(Y, spec, options, sigmas=sigmas, frozen_grids=frozen, start_id=s, sigma_seed=draw)
        for s in range(options.n_starts)
    ]
    objs = np.array([r.objective for r in results])
    # ties resolved by start id so the choice never depends on evaluation order
    best = min(results, key=lambda r: (r.objective, r.start_id))
    best.start_objectives = objs
    return best


def fit_averaged(Y, spec: ModelSpec, options: FitOptions | None = None, frozen_grids=None,
                 n_jobs: int | None = None) -> AveragedResult:
    """Best-of-``n_starts`` fits for each of ``n_draws`` permutation draws, averaged.

    Draw ``m`` uses permutations from stream ``(seed, 0, m)`` and start ``s``
    of that draw uses stream ``(seed, 1, m, s)``, so results do not depend on
    ``n_jobs``.
    """
    options = options or FitOptions()
    Y = _as_panel(Y)
    frozen = _frozen_list(spec, Y.shape[0], frozen_grids)
    if n_jobs is not None and n_jobs != 1 and options.n_draws > 1:
        from joblib import Parallel, delayed

        draws = Parallel(n_jobs=n_jobs)(
            delayed(_best_of_starts)(Y, spec, options, m, frozen) for m in range(options.n_draws)
        )
    else:
        draws = [_best_of_starts(Y, spec, options, m, frozen) for m in range(options.n_draws)]
    grids = [np.mean([d.grids[k] for d in draws], axis=0) for k in range(spec.K)]
    return AveragedResult(grids=grids, draws=draws, seed=options.seed, labels=spec.labels)


def mallows_fit(y, x2, n_iter: int = 100, burn_in: int = 50, seed: int = 0,
                init=None) -> QuantileGrid:
    """Deconvolution by simulation with a fresh permutation every iteration.

    Each step draws a permutation ``sigma``, rank-matches ``X1[sigma] + x2``
    to ``y`` and sets ``X1[sigma[i]] = y[pi[i]] - x2[i]``. Sorted iterates
    after ``burn_in`` are averaged.

    Parameters
    ----------
    y, x2 : array-like of shape (N,)
        Outcomes and a sample of the noise.
    n_iter, burn_in : int
        Total iterations and the number discarded.
    seed : int
    init : array-like, optional
        Starting values; defaults to ``y - mean(x2)``.
    """
    y = np.asarray(y, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if y.size != x2.size:
        raise InvalidDimensionError("y and x2 must have the same length")
    if not 0 <= burn_in < n_iter:
        raise InvalidParameterError("need 0 <= burn_in < n_iter")
    rng = np.random.default_rng(seed)
    N = y.size
    x1 = y - x2.mean() if init is None else np.asarray(init, dtype=float).ravel().copy()
    acc = np.zeros(N)
    for s in range(n_iter):
        sigma = rng.permutation(N)
        pi = sort_match(x1[sigma] + x2, y).pi
        new = np.empty(N)
        new[sigma] = y[pi] - x2
        x1 = new
        if s >= burn_in:
            acc += np.sort(x1)
    return QuantileGrid(acc / (n_iter - burn_in), 0)


_MODELS = ("fixed-effects", "deconvolution")


class MatchingEstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_averaged`.

    Parameters
    ----------
    model : {"fixed-effects", "deconvolution"} or array-like of shape (T, K)
        Named model or an explicit loading matrix.
    preset : {"weak", "strong", "default-c2"}
        Constraint preset; ``"default-c2"`` scales bounds by the estimated
        factor standard deviation with ``c = 2``.
    n_starts, n_draws, max_iter, tol : see :class:`FitOptions`
    random_state : int
    n_jobs : int, optional
        Workers used across permutation draws.

    Attributes
    ----------
    grids_ : list of ndarray
        Averaged pseudo-observations, one sorted array per factor.
    result_ : AveragedResult
    spec_ : ModelSpec
    """

    def __init__(self, model="fixed-effects", preset="weak", n_starts=1, n_draws=1,
                 max_iter=200, tol=1e-8, random_state=0, n_jobs=None):
        self.model = model
        self.preset = preset
        self.n_starts = n_starts
        self.n_draws = n_draws
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _make_spec(self, Y, noise):
        T = Y.shape[1]
        if isinstance(self.model, str):
            if self.model not in _MODELS:
                raise InvalidParameterError(f"unknown model {self.model!r}")
            base = deconvolution_spec() if self.model == "deconvolution" else fixed_effects_spec(T)
        else:
            base = ModelSpec(np.asarray(self.model, dtype=float))
        if self.preset == "default-c2":
            return data_scaled_spec(base, Y, [noise if f else None for f in base.frozen])
        zm = tuple(base.constraints.zero_mean_for(k) for k in range(base.K))
        return replace(base, constraints=preset_constraints(self.preset).with_zero_mean(zm))

    def fit(self, X, y=None, noise=None):
        """Fit on outcomes ``X`` of shape (N, T).

        ``noise`` is the observed noise sample for the deconvolution model.
        """
        Y = _as_panel(X)
        self.spec_ = self._make_spec(Y, noise)
        frozen = [noise if f else None for f in self.spec_.frozen]
        opts = FitOptions(max_iter=self.max_iter, tol=self.tol, n_starts=self.n_starts,
                          n_draws=self.n_draws, seed=self.random_state)
        self.result_ = fit_averaged(Y, self.spec_, opts, frozen_grids=frozen, n_jobs=self.n_jobs)
        self.grids_ = self.result_.grids
        self.objective_ = float(np.mean(self.result_.objectives))
        self.n_features_in_ = Y.shape[1]
        return self

    def quantile_function(self, k: int = 0) -> QuantileGrid:
        check_is_fitted(self, "grids_")
        return QuantileGrid(self.grids_[k], k)

    def sample(self, n_samples=None, random_state=None) -> np.ndarray:
        """Simulated outcomes from the fitted factor grids."""
        check_is_fitted(self, "grids_")
        rng = np.random.default_rng(random_state)
        N = len(self.grids_[0])
        n = N if n_samples is None else int(n_samples)
        idx = [rng.integers(N, size=n) for _ in self.grids_]
        return predictions(self.grids_, self.spec_.loading, idx)

    def score(self, X, y=None) -> float:
        """Negative mean squared Wasserstein distance to fresh model predictions."""
        check_is_fitted(self, "grids_")
        Y = _as_panel(X)
        if Y.shape[0] != len(self.grids_[0]):
            raise InvalidDimensionError("score needs the fitted sample size")
        sig = draw_sigmas(np.random.default_rng(self.random_state), Y.shape[0], self.spec_.K)
        return -wasserstein_objective(Y, self.grids_, self.spec_.loading, sig) / Y.shape[0]
