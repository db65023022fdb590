import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentmatch._lsa import sap_warm
from latentmatch.assignment import (
    build_cost,
    match,
    match_with_capacity,
    matched_cost,
    solve_assignment,
    sort_match,
)
from latentmatch.exceptions import InvalidDimensionError, InvalidInputError


def brute_force(C):
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def loop_cost(Z, Y):
    n = Z.shape[0]
    C = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for t in range(Z.shape[1]):
                C[i, j] += (Y[j, t] - Z[i, t]) ** 2
    return C


class TestBuildCost:
    def test_two_points(self):
        np.testing.assert_array_equal(build_cost([[0], [1]], [[0], [1]]), [[0, 1], [1, 0]])

    def test_pythagoras(self):
        np.testing.assert_array_equal(build_cost([[0, 0]], [[3, 4]]), [[25]])

    def test_matches_loop_oracle(self, rng):
        Z, Y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(build_cost(Z, Y), loop_cost(Z, Y), rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidDimensionError):
            build_cost(np.zeros((3, 2)), np.zeros((3, 1)))


class TestSortMatch:
    def test_rank_matching(self):
        a = sort_match([3, 1, 2], [10, 20, 30])
        # prediction 3 is the largest and gets 30 (index 2), etc.
        np.testing.assert_array_equal(a.pi, [2, 0, 1])
        assert a.cost == (30 - 3) ** 2 + (10 - 1) ** 2 + (20 - 2) ** 2

    def test_co_sorted_identity(self):
        a = sort_match([1, 2, 3, 4], [5, 6, 7, 8])
        np.testing.assert_array_equal(a.pi, np.arange(4))

    def test_brute_force_n5(self, rng):
        z, y = rng.normal(size=5), rng.normal(size=5)
        a = sort_match(z, y)
        assert a.cost == pytest.approx(brute_force(build_cost(z, y)), rel=1e-12)

    def test_ties_stable(self):
        a = sort_match([0, 0, 0], [1, 2, 3])
        np.testing.assert_array_equal(a.pi, [0, 1, 2])


class TestSolveAssignment:
    def test_identity_dominant(self):
        C = 1.0 - np.eye(5)
        a = solve_assignment(C)
        np.testing.assert_array_equal(a.pi, np.arange(5))
        assert a.cost == 0

    def test_brute_force_n6(self, rng):
        C = rng.random((6, 6))
        assert solve_assignment(C).cost == pytest.approx(brute_force(C), rel=1e-12)

    def test_non_finite(self):
        C = np.ones((3, 3))
        C[1, 1] = np.inf
        with pytest.raises(InvalidInputError):
            solve_assignment(C)

    def test_not_square(self):
        with pytest.raises(InvalidDimensionError):
            solve_assignment(np.ones((2, 3)))

    def test_scalar_equivalence(self, rng):
        for _ in range(100):
            z, y = rng.normal(size=30), rng.normal(size=30)
            a = solve_assignment(build_cost(z, y))
            assert a.cost == pytest.approx(sort_match(z, y).cost, rel=1e-9)


@st.composite
def instances(draw, max_n=7, max_t=3):
    n = draw(st.integers(1, max_n))
    t = draw(st.integers(1, max_t))
    el = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
    return (draw(arrays(float, (n, t), elements=el)), draw(arrays(float, (n, t), elements=el)))


class TestAssignmentProperties:
    @given(instances())
    def test_optimal_and_consistent(self, inst):
        Z, Y = inst
        a = match(Z, Y)
        assert sorted(a.pi.tolist()) == list(range(len(Z)))
        assert a.cost == pytest.approx(matched_cost(Z, Y, a.pi), rel=1e-9, abs=1e-9)
        C = build_cost(Z, Y)
        assert a.cost <= C.trace() + 1e-9 * (1 + C.trace())
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.permutation(len(Z))
            assert a.cost <= C[np.arange(len(Z)), p].sum() * (1 + 1e-9) + 1e-9

    @given(instances(max_n=6))
    def test_exhaustive(self, inst):
        Z, Y = inst
        best = brute_force(build_cost(Z, Y))
        assert solve_assignment(build_cost(Z, Y)).cost == pytest.approx(best, rel=1e-9, abs=1e-9)

    @given(instances(), st.randoms(use_true_random=False))
    def test_permuting_outcomes_keeps_optimum(self, inst, rnd):
        Z, Y = inst
        p = list(range(len(Y)))
        rnd.shuffle(p)
        a = match(Z, Y).cost
        b = match(Z, Y[p]).cost
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)

    @given(arrays(float, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
           st.randoms(use_true_random=False))
    def test_scalar_solvers_agree(self, z, rnd):
        y = np.array([rnd.uniform(-1e3, 1e3) for _ in z])
        assert solve_assignment(build_cost(z, y)).cost == pytest.approx(
            sort_match(z, y).cost, rel=1e-9, abs=1e-9)


class TestCapacity:
    def test_each_outcome_used_capacity_times(self, rng):
        Y = rng.normal(size=(10, 2))
        Z = rng.normal(size=(30, 2))
        a = match_with_capacity(Z, Y, 3)
        np.testing.assert_array_equal(np.bincount(a.pi, minlength=10), 3)

    def test_equals_replicated_square_problem(self, rng):
        Y = rng.normal(size=(6, 2))
        Z = rng.normal(size=(12, 2))
        a = match_with_capacity(Z, Y, 2)
        ref = solve_assignment(build_cost(Z, np.repeat(Y, 2, axis=0))).cost
        assert a.cost == pytest.approx(ref, rel=1e-12)

    def test_warm_prices_give_the_same_optimum(self, rng):
        Y = rng.normal(size=(20, 3))
        prices = np.full(100, np.nan)
        for _ in range(5):
            Z = rng.normal(size=(100, 3))
            warm = match_with_capacity(Z, Y, 5, prices)
            cold = match_with_capacity(Z, Y, 5)
            assert warm.cost == pytest.approx(cold.cost, rel=1e-10)
            np.testing.assert_array_equal(np.bincount(warm.pi, minlength=20), 5)

    def test_scalar_capacity(self, rng):
        y = rng.normal(size=5)
        z = rng.normal(size=15)
        a = match_with_capacity(z, y, 3)
        ref = solve_assignment(build_cost(z, np.repeat(y, 3))).cost
        assert a.cost == pytest.approx(ref, rel=1e-12)

    def test_wrong_size(self):
        with pytest.raises(InvalidDimensionError):
            match_with_capacity(np.zeros((5, 1)), np.zeros((2, 1)), 2)


class TestWarmSolver:
    @given(st.integers(1, 25), st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 100.0]))
    def test_any_start_prices_are_exact(self, n, seed, scale):
        r = np.random.default_rng(seed)
        C = r.random((n, n))
        v = r.normal(size=n) * scale
        pi = sap_warm(C, v)
        assert sorted(pi.tolist()) == list(range(n))
        assert C[np.arange(n), pi].sum() == pytest.approx(solve_assignment(C).cost, rel=1e-9)

    def test_infeasible_flagged(self):
        C = np.full((3, 3), np.inf)
        assert sap_warm(C, np.zeros(3))[0] == -1
