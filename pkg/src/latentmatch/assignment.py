"""Exact matching of model predictions to observed outcomes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._lsa import sap_warm
from .exceptions import InvalidDimensionError, InvalidInputError


@dataclass(frozen=True)
class Assignment:
    """``pi[i]`` is the outcome row matched to prediction ``i`` (0-based)."""

    pi: np.ndarray
    cost: float

    def __len__(self):
        return len(self.pi)


def _as_rows(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InvalidDimensionError(f"{name} must be 1-D or 2-D")
    return a


def build_cost(predictions, outcomes) -> np.ndarray:
    """Squared Euclidean distances; entry ``(i, j)`` pairs prediction i with outcome j."""
    Z = _as_rows(predictions, "predictions")
    Y = _as_rows(outcomes, "outcomes")
    if Z.shape != Y.shape:
        raise InvalidDimensionError(f"shape mismatch: {Z.shape} vs {Y.shape}")
    return _sq_dist(Z, Y)


def _sq_dist(Z, Y):
    C = np.zeros((Z.shape[0], Y.shape[0]))
    for t in range(Z.shape[1]):
        d = Y[None, :, t] - Z[:, t, None]
        C += d * d
    return C


def matched_cost(predictions, outcomes, pi) -> float:
    """Total squared distance of a given matching, summed in index order."""
    Z = _as_rows(predictions, "predictions")
    Y = _as_rows(outcomes, "outcomes")
    d = Y[np.asarray(pi)] - Z
    return float(np.sum(d * d))


def sort_match(predictions, outcomes) -> Assignment:
    """Comonotone matching for scalar data: the i-th smallest prediction gets the
    i-th smallest outcome. Ties are resolved by original index (stable sort)."""
    z = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(outcomes, dtype=float).ravel()
    if z.shape != y.shape:
        raise InvalidDimensionError(f"length mismatch: {z.size} vs {y.size}")
    pi = np.empty(z.size, dtype=np.intp)
    pi[np.argsort(z, kind="stable")] = np.argsort(y, kind="stable")
    d = y[pi] - z
    return Assignment(pi, float(np.sum(d * d)))


def solve_assignment(cost) -> Assignment:
    """Minimum-cost perfect matching on a square cost matrix.

    Uses the shortest augmenting path solver in SciPy (a Jonker-Volgenant
    variant), which is exact.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InvalidDimensionError(f"cost matrix must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidInputError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(C)
    pi = np.empty(C.shape[0], dtype=np.intp)
    pi[rows] = cols
    return Assignment(pi, float(C[np.arange(C.shape[0]), pi].sum()))


def match(predictions, outcomes) -> Assignment:
    """Dispatch to ``sort_match`` for scalar outcomes, else the general solver."""
    Z = _as_rows(predictions, "predictions")
    Y = _as_rows(outcomes, "outcomes")
    if Z.shape != Y.shape:
        raise InvalidDimensionError(f"shape mismatch: {Z.shape} vs {Y.shape}")
    if Z.shape[1] == 1:
        return sort_match(Z[:, 0], Y[:, 0])
    a = solve_assignment(build_cost(Z, Y))
    return Assignment(a.pi, matched_cost(Z, Y, a.pi))


def _dual_bound(C, v):
    return float(np.sum(np.min(C - v[None, :], axis=1)) + np.sum(v))


def match_with_capacity(predictions, outcomes, capacity: int, prices=None) -> Assignment:
    """Match ``capacity * N`` predictions to ``N`` outcomes, each outcome used
    exactly ``capacity`` times. Solved as a square problem on replicated outcomes.

    ``prices`` (length ``capacity * N``) enables a warm-started exact solver
    for a sequence of related problems: pass an array of NaN on the first
    call and the same array afterwards; it is updated in place.
    """
    Z = _as_rows(predictions, "predictions")
    Y = _as_rows(outcomes, "outcomes")
    if Z.shape[0] != capacity * Y.shape[0] or Z.shape[1] != Y.shape[1]:
        raise InvalidDimensionError("predictions must be capacity times the outcomes")
    if capacity == 1:
        return match(Z, Y)
    if Z.shape[1] == 1:
        a = sort_match(Z[:, 0], np.repeat(Y[:, 0], capacity))
    else:
        C = np.repeat(_sq_dist(Z, Y), capacity, axis=1)
        if prices is None:
            a = solve_assignment(C)
        elif np.isnan(prices).any():
            # no usable prices yet: solve cold and seed them for the next call
            a = solve_assignment(C)
            prices[:] = C.min(axis=0)
        else:
            if prices.shape != (C.shape[0],):
                raise InvalidDimensionError("prices must have one entry per prediction")
            # keep whichever start has the larger dual bound
            fresh = C.min(axis=0)
            if _dual_bound(C, fresh) > _dual_bound(C, prices):
                prices[:] = fresh
            pi = sap_warm(C, prices)
            if pi[0] < 0:
                raise InvalidInputError("cost matrix has non-finite entries")
            a = Assignment(pi, 0.0)
    pi = a.pi // capacity
    return Assignment(pi, matched_cost(Z, Y, pi))
