"""Shape-constrained least squares for pseudo-observation grids (the update step)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _chainqp
from .exceptions import InfeasibleConstraintsError, InvalidDimensionError, InvalidInputError
from .model import ShapeConstraints

FEASIBILITY_RTOL = 1e-9


@dataclass(frozen=True)
class QuantileGrid:
    """Sorted pseudo-observations of one factor on the grid ``i / (N + 1)``."""

    values: np.ndarray
    factor: int = 0

    @property
    def levels(self) -> np.ndarray:
        n = len(self.values)
        return np.arange(1, n + 1) / (n + 1)

    def derivative(self) -> np.ndarray:
        """Scaled first differences, an estimate of the quantile-function slope."""
        return (len(self.values) + 1) * np.diff(self.values)

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _raw_bounds(n: int, c: ShapeConstraints):
    h = n + 1.0
    curv = np.inf if c.second_diff_bound is None else c.second_diff_bound / h**2
    return c.slope_lower / h, c.slope_upper / h, curv, c.level_bound


@lru_cache(maxsize=64)
def _rows(n, slope_lo, slope_hi, curv, level):
    return _chainqp.build_rows(n, slope_lo, slope_hi, curv, level)


def check_feasible_set(n: int, constraints: ShapeConstraints) -> None:
    """Raise if no grid of length ``n`` satisfies ``constraints``.

    A linear grid centred at zero with the minimal slope is feasible whenever
    its span fits inside the level band, and it has zero curvature and mean.
    """
    lo, hi, _, level = _raw_bounds(n, constraints)
    if (n - 1) * lo > 2 * level * (1 + 1e-12):
        raise InfeasibleConstraintsError(
            f"minimal span {(n - 1) * lo:.6g} exceeds level band width {2 * level:.6g}"
        )
    if lo > hi:
        raise InfeasibleConstraintsError("slope_lower exceeds slope_upper")


def grid_violation(x, constraints: ShapeConstraints, zero_mean: bool = False) -> float:
    """Largest constraint violation of ``x`` in raw units (0 when feasible)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    lo, hi, curv, level = _raw_bounds(n, constraints)
    v = [0.0, float(np.max(np.abs(x)) - level)]
    if n > 1:
        d = np.diff(x)
        v += [float(np.max(lo - d)), float(np.max(d - hi))]
    if n > 2 and np.isfinite(curv):
        v.append(float(np.max(np.abs(np.diff(x, 2))) - curv))
    if zero_mean:
        v.append(abs(float(np.sum(x))) / max(n, 1))
    return max(v)


def is_feasible(x, constraints: ShapeConstraints, zero_mean: bool = False) -> bool:
    x = np.asarray(x, dtype=float)
    scale = 1.0 + constraints.level_bound if x.size == 0 else 1.0 + np.max(np.abs(x))
    return grid_violation(x, constraints, zero_mean) <= FEASIBILITY_RTOL * scale


def bounded_isotonic_fit(targets, weights=None, constraints: ShapeConstraints | None = None,
                         zero_mean: bool = False, active=None, return_active: bool = False):
    """Weighted least-squares projection of ``targets`` onto the constrained grid set.

    Minimizes ``sum_i w_i (t_i - x_i)**2`` subject to the level, slope and
    curvature bounds of ``constraints`` (and ``sum(x) == 0`` if ``zero_mean``).

    Parameters
    ----------
    targets : array-like of shape (n,)
    weights : array-like of shape (n,), optional
        Strictly positive weights; uniform by default.
    constraints : ShapeConstraints, optional
        Defaults to monotonicity with very loose bounds.
    zero_mean : bool
    active : ndarray of bool, optional
        Active-row guess from a previous solve of the same size and
        constraints; speeds up repeated solves.
    return_active : bool
        Also return the final active-row mask.

    Returns
    -------
    ndarray of shape (n,), and the active mask if ``return_active``.
    """
    t = np.ascontiguousarray(targets, dtype=float).ravel()
    n = t.size
    if n == 0:
        raise InvalidDimensionError("empty target vector")
    if not np.all(np.isfinite(t)):
        raise InvalidInputError("targets must be finite")
    if weights is None:
        w = np.ones(n)
        uniform = True
    else:
        w = np.ascontiguousarray(weights, dtype=float).ravel()
        if w.shape != t.shape:
            raise InvalidDimensionError("weights and targets differ in length")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be positive and finite")
        uniform = bool(np.all(w == w[0]))
    c = constraints if constraints is not None else ShapeConstraints()
    check_feasible_set(n, c)
    x, active = _project(t, w, uniform, zero_mean, n, c, active)
    if zero_mean:
        x = x - x.mean() if abs(x.sum()) > 0 else x
    if not is_feasible(x, c, zero_mean):
        raise RuntimeError(
            f"projection returned an infeasible grid (violation {grid_violation(x, c, zero_mean):.3g})"
        )
    return (x, active) if return_active else x


def _project(t, w, uniform, zero_mean, n, c, active):
    lo, hi, curv, level = _raw_bounds(n, c)
    starts, widths, kinds, coefs, rhs = _rows(n, lo, hi, curv, level)
    tol = 1e-13 * (1.0 + float(np.max(np.abs(t))))
    max_iter = 50 * (starts.size + n) + 100
    if active is None or active.shape != starts.shape:
        if uniform or not zero_mean:
            x0, active, _, _ = _chainqp.pava_start(t, w, starts, kinds, lo, zero_mean)
            active = active | _chainqp.violated_rows(x0, starts, widths, coefs, rhs, tol)
        else:
            active = np.zeros(starts.size, dtype=np.bool_)
    x, act, _, _, status = _chainqp.warm_project(
        t, w, starts, widths, coefs, rhs, zero_mean, active, tol, max_iter)
    if status == 1:
        raise InfeasibleConstraintsError("constraint set is empty")
    if status == 2:
        raise RuntimeError("active-set projection did not converge")
    return x, act


def predictions(grids, A, index_maps, gates=None) -> np.ndarray:
    """Model predictions ``Z[i, t] = sum_k A[t, k] g[i, k] x_k[idx_k(i)]``."""
    A = np.asarray(A, dtype=float)
    cols = np.column_stack([np.asarray(grids[k])[index_maps[k]] for k in range(A.shape[1])])
    if gates is not None:
        cols = cols * gates
    return cols @ A.T


class WarmState:
    """Active constraint rows carried between update steps of one fit."""

    def __init__(self):
        self.key = None
        self.masks = None
        self.have = None

    def prepare(self, key, K, m):
        if self.key != key:
            self.key = key
            self.masks = np.zeros((K, m), dtype=np.bool_)
            self.have = np.zeros(K, dtype=np.bool_)
        return self.masks, self.have


def update_step(Y_matched, A, index_maps, constraints: ShapeConstraints, warm_start,
                frozen=None, gates=None, zero_mean=None, max_sweeps: int = 500,
                rtol: float = 1e-9, active: WarmState | None = None):
    """Refit all free grids by block-coordinate descent for a fixed matching.

    Each block is an exact weighted projection of the partial-residual
    targets of one factor onto its constraint set.

    Parameters
    ----------
    Y_matched : ndarray of shape (P, T)
        Outcomes reordered so row ``i`` is matched to prediction ``i``.
    A : ndarray of shape (T, K)
    index_maps : sequence of K integer arrays of length P
        ``index_maps[k][i]`` is the grid index of factor k used by prediction i
        (the random permutations, or many-to-one maps when P > N).
    constraints : ShapeConstraints
    warm_start : sequence of K arrays of length N
        Feasible starting grids; frozen factors are kept as given.
    frozen : sequence of bool, optional
    gates : ndarray of shape (P, K), optional
        Multipliers on each factor's contribution (mixture indicators).
    zero_mean : sequence of bool, optional
        Defaults to ``constraints.zero_mean`` (all True when unset).
    max_sweeps, rtol : int, float
        Stop when a sweep lowers the objective by less than ``rtol`` relative.
    active : WarmState, optional
        Active rows from earlier calls of the same fit; updated in place.

    Returns
    -------
    grids : list of ndarray
    info : dict with keys ``objective``, ``start_objective``, ``sweeps``.
    """
    Y = np.asarray(Y_matched, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    A = np.ascontiguousarray(A, dtype=float)
    T, K = A.shape
    if Y.shape[1] != T:
        raise InvalidDimensionError("outcome columns must match loading rows")
    P = Y.shape[0]
    frozen = np.array(frozen if frozen is not None else (False,) * K, dtype=np.bool_)
    if zero_mean is None:
        zero_mean = tuple(constraints.zero_mean_for(k) for k in range(K))
    zero_mean = np.array(zero_mean, dtype=np.bool_)
    grids = np.array([np.asarray(g, dtype=float) for g in warm_start])
    if grids.ndim != 2 or grids.shape[0] != K:
        raise InvalidDimensionError("need K grids of equal length")
    n = grids.shape[1]
    maps = np.array([np.asarray(m, dtype=np.int64) for m in index_maps])
    if maps.shape != (K, P) or maps.min() < 0 or maps.max() >= n:
        raise InvalidDimensionError("index maps must be K arrays of valid grid indices")
    gates = np.ones((P, K)) if gates is None else np.ascontiguousarray(gates, dtype=float)
    if np.any(~frozen):
        check_feasible_set(n, constraints)
    lo, hi, curv, level = _raw_bounds(n, constraints)
    starts, widths, kinds, coefs, rhs = _rows(n, lo, hi, curv, level)
    state = active if active is not None else WarmState()
    masks, have = state.prepare((n, constraints, K), K, starts.size)
    start_obj, obj, sweeps, status = _chainqp.bcd_update(
        np.ascontiguousarray(Y), A, maps, gates, grids, frozen, zero_mean, starts, widths,
        kinds, coefs, rhs, lo, masks, have, int(max_sweeps), float(rtol))
    if status == 1:
        raise InfeasibleConstraintsError("constraint set is empty")
    if status != 0:
        raise RuntimeError("active-set projection did not converge")
    out = []
    for k in range(K):
        if not frozen[k] and not is_feasible(grids[k], constraints, bool(zero_mean[k])):
            raise RuntimeError(
                f"update produced an infeasible grid (violation "
                f"{grid_violation(grids[k], constraints, bool(zero_mean[k])):.3g})"
            )
        out.append(grids[k] if not frozen[k] else np.asarray(warm_start[k], dtype=float))
    return out, {"objective": obj, "start_objective": start_obj, "sweeps": sweeps}
