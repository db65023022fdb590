"""Factor-model structure: loading matrices, shape constraints and identification."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import InvalidDimensionError, InvalidParameterError

IDENTIFICATION_RTOL = 1e-10


@dataclass(frozen=True)
class ShapeConstraints:
    """Bounds defining the feasible set of a pseudo-observation grid.

    Slopes are measured as ``(N + 1) * (x[i+1] - x[i])`` and curvatures as
    ``(N + 1)**2 * |x[i+2] - 2 x[i+1] + x[i]|`` so that the bounds refer to
    derivatives of the quantile function on the grid ``i / (N + 1)``.

    Parameters
    ----------
    level_bound : float
        Bound on ``|x[i]|``.
    slope_lower, slope_upper : float
        Bounds on scaled first differences.
    second_diff_bound : float or None
        Bound on scaled absolute second differences. ``None`` disables it.
    zero_mean : tuple of bool
        One flag per factor; flagged grids must sum to zero. An empty tuple
        means "apply to every factor".
    """

    level_bound: float = 10000.0
    slope_lower: float = 0.0
    slope_upper: float = 10000.0
    second_diff_bound: float | None = 10000.0
    zero_mean: tuple[bool, ...] = ()

    def __post_init__(self):
        for name in ("level_bound", "slope_lower", "slope_upper"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"{name} must be finite")
        if self.level_bound <= 0:
            raise InvalidParameterError("level_bound must be positive")
        if not 0 <= self.slope_lower < self.slope_upper:
            raise InvalidParameterError("need 0 <= slope_lower < slope_upper")
        if self.second_diff_bound is not None and not self.second_diff_bound > 0:
            raise InvalidParameterError("second_diff_bound must be positive")
        object.__setattr__(self, "zero_mean", tuple(bool(z) for z in self.zero_mean))

    def zero_mean_for(self, k: int) -> bool:
        if not self.zero_mean:
            return True
        return self.zero_mean[k]

    def with_zero_mean(self, flags: Sequence[bool]) -> "ShapeConstraints":
        return replace(self, zero_mean=tuple(bool(f) for f in flags))

    def as_dict(self) -> dict:
        return {
            "level_bound": self.level_bound,
            "slope_lower": self.slope_lower,
            "slope_upper": self.slope_upper,
            "second_diff_bound": self.second_diff_bound,
            "zero_mean": list(self.zero_mean),
        }


# (slope_lower, level/slope/curvature upper) pairs used in the Monte Carlo designs.
PRESETS = {
    "strong": (0.1, 10.0),
    "weak": (0.0, 10000.0),
}


def preset_constraints(name: str, zero_mean: Sequence[bool] = ()) -> ShapeConstraints:
    """Constraint presets: ``"strong"``, ``"weak"`` (``"default-c2"`` needs sigmas)."""
    try:
        lower, upper = PRESETS[name]
    except KeyError:
        raise InvalidParameterError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}"
        ) from None
    return ShapeConstraints(
        level_bound=upper,
        slope_lower=lower,
        slope_upper=upper,
        second_diff_bound=upper,
        zero_mean=tuple(zero_mean),
    )


def sweep_constraints(upper: float, zero_mean: Sequence[bool] = ()) -> ShapeConstraints:
    """Single-parameter family with ``slope_lower = 1 / upper``."""
    if not upper > 1:
        raise InvalidParameterError("penalization constant must exceed 1")
    return ShapeConstraints(
        level_bound=upper,
        slope_lower=1.0 / upper,
        slope_upper=upper,
        second_diff_bound=upper,
        zero_mean=tuple(zero_mean),
    )


def default_constraints(sigma_hat: float, c: float = 2.0) -> ShapeConstraints:
    """Truncated-normal based bounds scaled by a factor standard deviation.

    With ``c = 1`` the bounds bind for a normal truncated at its 1st and 99th
    percentiles; larger ``c`` loosens them.

    >>> default_constraints(1.0, 1.0).level_bound
    2.3
    """
    sigma_hat = float(sigma_hat)
    c = float(c)
    if not (sigma_hat > 0 and c > 0 and np.isfinite(sigma_hat) and np.isfinite(c)):
        raise InvalidParameterError("sigma_hat and c must be positive and finite")
    return ShapeConstraints(
        level_bound=2.3 * c * sigma_hat,
        slope_lower=2.5 / c * sigma_hat,
        slope_upper=37.0 * c * sigma_hat,
        second_diff_bound=3275.0 * c * sigma_hat,
    )


def _as_loading(A) -> np.ndarray:
    A = np.array(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise InvalidDimensionError(f"loading matrix must be 2-D and non-empty, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidParameterError("loading matrix has non-finite entries")
    if np.any(np.all(A == 0, axis=0)):
        raise InvalidParameterError("loading matrix has an all-zero column")
    A.setflags(write=False)
    return A


def validate_loading(A) -> np.ndarray:
    """Return ``A`` as a read-only float ``(T, K)`` array after checking invariants."""
    return _as_loading(A)


def fixed_effects_loading(T: int) -> np.ndarray:
    """``Y_t = X_1 + X_{t+1}``: a column of ones next to the identity.

    >>> fixed_effects_loading(2)
    array([[1., 1., 0.],
           [1., 0., 1.]])
    """
    T = int(T)
    if T < 1:
        raise InvalidDimensionError("T must be at least 1")
    return _as_loading(np.hstack([np.ones((T, 1)), np.eye(T)]))


def permanent_transitory_loading(T: int) -> np.ndarray:
    """Loadings of income growth under a random walk plus transitory noise.

    The first ``T`` columns carry the permanent innovations (the first and
    last absorb the initial and final transitory shocks), the remaining
    ``T - 1`` columns are interior transitory shocks entering with ``+1`` on
    the diagonal and ``-1`` one period later.
    """
    T = int(T)
    if T < 2:
        raise InvalidDimensionError("T must be at least 2")
    diff = np.zeros((T, T - 1))
    idx = np.arange(T - 1)
    diff[idx, idx] = 1.0
    diff[idx + 1, idx] = -1.0
    return _as_loading(np.hstack([np.eye(T), diff]))


@dataclass(frozen=True)
class IdentificationReport:
    identified: bool
    rank: int
    n_factors: int
    singular_values: np.ndarray = field(repr=False)

    def __bool__(self):
        return self.identified


def check_identification(A, rtol: float = IDENTIFICATION_RTOL) -> IdentificationReport:
    """Check linear independence of the vectors ``vec(A_k A_k')``.

    The numeric rank of the ``T**2 x K`` stacked matrix counts singular values
    above ``rtol`` times the largest one.
    """
    A = _as_loading(A)
    T, K = A.shape
    stacked = np.column_stack([np.outer(A[:, k], A[:, k]).ravel() for k in range(K)])
    sv = np.linalg.svd(stacked, compute_uv=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size else 0
    return IdentificationReport(rank == K, rank, K, sv)


def factor_variances(Y, A, floor: float = 1e-6) -> np.ndarray:
    """Minimum-distance factor variances from the outcome covariance matrix.

    Solves ``vec Cov(Y) = sum_k vec(A_k A_k') v_k`` by least squares and
    floors the result at ``floor`` times the average outcome variance.
    """
    A = _as_loading(A)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] != A.shape[0]:
        raise InvalidDimensionError("Y columns must match loading rows")
    cov = np.atleast_2d(np.cov(Y, rowvar=False))
    stacked = np.column_stack(
        [np.outer(A[:, k], A[:, k]).ravel() for k in range(A.shape[1])]
    )
    v, *_ = np.linalg.lstsq(stacked, cov.ravel(), rcond=None)
    scale = max(float(np.mean(np.diag(cov))), np.finfo(float).tiny)
    return np.maximum(v, floor * scale)


@dataclass(frozen=True)
class ModelSpec:
    """A loading matrix with its constraint set and factor labels.

    ``frozen`` marks factors whose grid is observed data (e.g. a noise
    sample in deconvolution); those grids enter predictions as-is and are
    never updated.
    """

    loading: np.ndarray
    constraints: ShapeConstraints = field(default_factory=lambda: preset_constraints("weak"))
    labels: tuple[str, ...] = ()
    frozen: tuple[bool, ...] = ()

    def __post_init__(self):
        A = _as_loading(self.loading)
        object.__setattr__(self, "loading", A)
        K = A.shape[1]
        labels = tuple(self.labels) or tuple(f"X{k + 1}" for k in range(K))
        if len(labels) != K:
            raise InvalidDimensionError("one label per factor required")
        object.__setattr__(self, "labels", labels)
        frozen = tuple(bool(f) for f in self.frozen) or (False,) * K
        if len(frozen) != K:
            raise InvalidDimensionError("one frozen flag per factor required")
        object.__setattr__(self, "frozen", frozen)
        zm = self.constraints.zero_mean
        if zm and len(zm) != K:
            raise InvalidDimensionError("zero_mean flags must match the number of factors")

    @property
    def T(self) -> int:
        return self.loading.shape[0]

    @property
    def K(self) -> int:
        return self.loading.shape[1]

    def zero_mean_flags(self) -> tuple[bool, ...]:
        return tuple(
            self.constraints.zero_mean_for(k) and not self.frozen[k] for k in range(self.K)
        )

    def as_dict(self) -> dict:
        return {
            "loading": self.loading.tolist(),
            "constraints": self.constraints.as_dict(),
            "labels": list(self.labels),
            "frozen": list(self.frozen),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        c = dict(d.get("constraints", {}))
        if "zero_mean" in c:
            c["zero_mean"] = tuple(c["zero_mean"])
        return cls(
            loading=np.asarray(d["loading"], dtype=float),
            constraints=ShapeConstraints(**c) if c else preset_constraints("weak"),
            labels=tuple(d.get("labels", ())),
            frozen=tuple(d.get("frozen", ())),
        )


def fixed_effects_spec(T: int, constraints: ShapeConstraints | None = None) -> ModelSpec:
    A = fixed_effects_loading(T)
    constraints = constraints or preset_constraints("weak")
    return ModelSpec(A, constraints, labels=tuple(f"X{k + 1}" for k in range(T + 1)))


def deconvolution_spec(constraints: ShapeConstraints | None = None) -> ModelSpec:
    """``Y = X1 + X2`` with ``X2`` an observed noise sample (frozen grid).

    The signal mean is left free since it is identified by the noise sample.
    """
    constraints = (constraints or preset_constraints("weak")).with_zero_mean([False, False])
    return ModelSpec(np.array([[1.0, 1.0]]), constraints, labels=("X1", "X2"), frozen=(False, True))
