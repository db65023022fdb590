import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentmatch.exceptions import InvalidDimensionError, InvalidParameterError
from latentmatch.model import (
    ModelSpec,
    ShapeConstraints,
    check_identification,
    default_constraints,
    deconvolution_spec,
    fixed_effects_loading,
    permanent_transitory_loading,
    preset_constraints,
)


def _gauss_rank(M, tol=1e-9):
    """Row-echelon rank by Gaussian elimination with partial pivoting."""
    M = np.array(M, dtype=float)
    rank, rows, cols = 0, M.shape[0], M.shape[1]
    for c in range(cols):
        piv = rank + np.argmax(np.abs(M[rank:, c])) if rank < rows else None
        if piv is None or abs(M[piv, c]) < tol:
            continue
        M[[rank, piv]] = M[[piv, rank]]
        M[rank + 1:] -= np.outer(M[rank + 1:, c] / M[rank, c], M[rank])
        rank += 1
        if rank == rows:
            break
    return rank


def _stacked(A):
    return np.column_stack([np.outer(A[:, k], A[:, k]).ravel() for k in range(A.shape[1])])


class TestLoadings:
    def test_fixed_effects_t2(self):
        np.testing.assert_array_equal(fixed_effects_loading(2), [[1, 1, 0], [1, 0, 1]])

    def test_fixed_effects_t1(self):
        np.testing.assert_array_equal(fixed_effects_loading(1), [[1, 1]])

    def test_fixed_effects_t3(self):
        np.testing.assert_array_equal(
            fixed_effects_loading(3), [[1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]])

    def test_fixed_effects_t0_raises(self):
        with pytest.raises(InvalidDimensionError):
            fixed_effects_loading(0)

    def test_permanent_transitory_t2(self):
        np.testing.assert_array_equal(permanent_transitory_loading(2), [[1, 0, 1], [0, 1, -1]])

    def test_permanent_transitory_t3(self):
        np.testing.assert_array_equal(
            permanent_transitory_loading(3),
            [[1, 0, 0, 1, 0], [0, 1, 0, -1, 1], [0, 0, 1, 0, -1]])

    def test_permanent_transitory_t4_first_row(self):
        np.testing.assert_array_equal(permanent_transitory_loading(4)[0], [1, 0, 0, 0, 1, 0, 0])

    def test_permanent_transitory_t1_raises(self):
        with pytest.raises(InvalidDimensionError):
            permanent_transitory_loading(1)

    @pytest.mark.parametrize("T", range(3, 9))
    def test_permanent_transitory_row_sums(self, T):
        A = permanent_transitory_loading(T)
        assert A.shape == (T, 2 * T - 1)
        sums = A.sum(axis=1)
        assert sums[0] == 2 and sums[-1] == 0
        np.testing.assert_array_equal(sums[1:-1], 1)

    def test_loading_is_read_only(self):
        A = fixed_effects_loading(2)
        with pytest.raises(ValueError):
            A[0, 0] = 5

    def test_zero_column_rejected(self):
        with pytest.raises(InvalidParameterError):
            ModelSpec(np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_non_finite_rejected(self):
        with pytest.raises((InvalidDimensionError, InvalidParameterError, ValueError)):
            ModelSpec(np.array([[1.0, np.nan]]))


class TestIdentification:
    def test_fixed_effects_t2(self):
        rep = check_identification(fixed_effects_loading(2))
        assert rep.identified and rep.rank == 3
        assert _gauss_rank(_stacked(fixed_effects_loading(2))) == 3

    def test_duplicate_columns(self):
        A = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
        assert not check_identification(A)

    def test_permanent_transitory_t3(self):
        A = permanent_transitory_loading(3)
        rep = check_identification(A)
        assert rep.identified and rep.rank == 5
        assert _gauss_rank(_stacked(A)) == 5

    @pytest.mark.parametrize("T", range(2, 8))
    def test_fixed_effects_always_identified(self, T):
        assert check_identification(fixed_effects_loading(T))

    def test_deconvolution_single_row_not_identified(self):
        # two free factors in one equation: only the known-noise design identifies
        assert not check_identification(np.array([[1.0, 1.0]]))


class TestConstraints:
    def test_default_c1(self):
        c = default_constraints(1.0, 1.0)
        np.testing.assert_allclose(
            [c.level_bound, c.slope_lower, c.slope_upper, c.second_diff_bound],
            [2.3, 2.5, 37, 3275])

    def test_default_c2(self):
        c = default_constraints(1.0, 2.0)
        np.testing.assert_allclose(
            [c.level_bound, c.slope_lower, c.slope_upper, c.second_diff_bound],
            [4.6, 1.25, 74, 6550])

    def test_default_half_sigma(self):
        c = default_constraints(0.5, 1.0)
        np.testing.assert_allclose(
            [c.level_bound, c.slope_lower, c.slope_upper, c.second_diff_bound],
            [1.15, 1.25, 18.5, 1637.5])

    @pytest.mark.parametrize("s,c", [(0, 1), (-1, 1), (1, 0), (1, -2), (np.inf, 1)])
    def test_default_rejects_nonpositive(self, s, c):
        with pytest.raises(InvalidParameterError):
            default_constraints(s, c)

    # below c = sqrt(2.5 / 37) the slope bounds cross
    @given(st.floats(0.01, 100), st.floats(0.3, 10), st.floats(0.01, 100))
    def test_default_homogeneous(self, s, c, lam):
        a = default_constraints(s, c)
        b = default_constraints(lam * s, c)
        for f in ("level_bound", "slope_lower", "slope_upper", "second_diff_bound"):
            assert getattr(b, f) == pytest.approx(lam * getattr(a, f), rel=1e-12)

    def test_presets(self):
        s = preset_constraints("strong")
        w = preset_constraints("weak")
        assert (s.slope_lower, s.slope_upper, s.level_bound) == (0.1, 10, 10)
        assert (w.slope_lower, w.slope_upper, w.level_bound) == (0, 10000, 10000)

    def test_unknown_preset(self):
        with pytest.raises(InvalidParameterError):
            preset_constraints("medium")

    @pytest.mark.parametrize("kw", [
        dict(level_bound=0), dict(slope_lower=-1), dict(slope_lower=5, slope_upper=5),
        dict(second_diff_bound=0),
    ])
    def test_invalid_constraints(self, kw):
        with pytest.raises(InvalidParameterError):
            ShapeConstraints(**kw)


class TestModelSpec:
    def test_round_trip(self):
        spec = ModelSpec(fixed_effects_loading(2), preset_constraints("strong", [True] * 3))
        back = ModelSpec.from_dict(spec.as_dict())
        np.testing.assert_array_equal(back.loading, spec.loading)
        assert back.constraints == spec.constraints
        assert back.labels == spec.labels

    def test_deconvolution_spec_frozen_noise(self):
        spec = deconvolution_spec()
        assert spec.frozen == (False, True)
        assert spec.zero_mean_flags() == (False, False)

    def test_label_count_checked(self):
        with pytest.raises(InvalidDimensionError):
            ModelSpec(fixed_effects_loading(2), labels=("a", "b"))
