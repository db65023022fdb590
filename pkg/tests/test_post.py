import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from latentmatch.exceptions import (
    CollinearityError,
    DegenerateSampleError,
    InvalidDimensionError,
    InvalidParameterError,
)
from latentmatch.post import (
    conditional_expectation,
    conditional_means,
    constrained_predictor,
    cross_moment,
    cyclicality_regression,
    dispersion_skewness,
    empirical_quantile,
    kernel_density,
    moment,
    newey_west_ols,
    silverman_bandwidth,
)


class TestDensity:
    def test_single_point_peak(self):
        d = kernel_density([0.0], b=1.0, eval_points=[0.0])
        assert d.density[0] == pytest.approx(1 / np.sqrt(2 * np.pi), rel=1e-14)

    def test_matches_scipy_norm_mixture(self, rng):
        v = rng.normal(size=30)
        x = np.linspace(-3, 3, 7)
        ref = stats.norm.pdf((x[:, None] - v[None, :]) / 0.4).mean(axis=1) / 0.4
        np.testing.assert_allclose(kernel_density(v, 0.4, x).density, ref, rtol=1e-12)

    def test_integrates_to_one(self, rng):
        assert kernel_density(rng.normal(size=200)).integral() == pytest.approx(1, abs=1e-3)

    def test_silverman(self, rng):
        v = rng.normal(size=100)
        sd = np.std(v, ddof=1)
        iqr = np.subtract(*np.percentile(v, [75, 25])) / 1.34
        assert silverman_bandwidth(v) == pytest.approx(0.9 * min(sd, iqr) * 100 ** -0.2)

    def test_seeded_normal_range(self):
        b = silverman_bandwidth(np.random.default_rng(0).standard_normal(100))
        assert 0.2 < b < 0.6

    def test_homogeneity_and_rate(self):
        u = np.arange(1, 101) / 101
        v = stats.norm.ppf(u)
        assert silverman_bandwidth(10 * v) == pytest.approx(10 * silverman_bandwidth(v))
        v4 = stats.norm.ppf(np.arange(1, 401) / 401)
        ratio = silverman_bandwidth(v4) / silverman_bandwidth(v)
        assert ratio == pytest.approx(4 ** -0.2, rel=0.03)

    def test_symmetry(self):
        g = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        x = np.linspace(0.1, 4, 9)
        d = kernel_density(g, 0.7, np.concatenate([x, -x])).density
        np.testing.assert_allclose(d[:9], d[9:], atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            silverman_bandwidth(np.ones(10))
        with pytest.raises(InvalidParameterError):
            kernel_density([0.0, 1.0], b=0.0)

    def test_csv(self, tmp_path):
        d = kernel_density([0.0, 1.0], b=1.0, eval_points=[0.5])
        d.to_csv(tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "x,density"
        assert float(lines[1].split(",")[1]) == d.density[0]


class TestConditional:
    def test_three_point_by_hand(self):
        # Y = X1 + X2 with X2 known density: weights are phi(y - x1_i)
        x1 = np.array([-1.0, 0.0, 2.0])
        x2 = np.zeros(3)
        y = 0.5
        w = stats.norm.pdf(y - x1)
        expected = np.sum(w * x1) / np.sum(w)
        logf = [None, stats.norm.logpdf]
        got = conditional_expectation(np.array([[1.0, 1.0]]), [x1, x2], [y], k=0,
                                      log_densities=logf)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_concentrated_noise_picks_closest_signal(self, rng):
        A = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        x1 = np.sort(rng.normal(size=30))
        noise = [np.sort(rng.normal(size=30)) * 1e-4 for _ in range(2)]
        y = np.array([0.31, 0.47])
        got = conditional_expectation(A, [x1, *noise], y, k=0, bandwidths=[1.0, 0.01, 0.01])
        assert got == pytest.approx(x1[np.argmin(np.abs(x1 - y.mean()))], abs=1e-8)

    def test_flat_weights_average(self, rng):
        A = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        grids = [np.sort(rng.normal(size=20)) for _ in range(3)]
        flat = [lambda v: np.zeros(np.shape(v))] * 3
        got = conditional_expectation(A, grids, [0.2, -0.1], k=0, log_densities=flat)
        assert got == pytest.approx(grids[0].mean(), rel=1e-12)

    def test_within_hull(self, rng):
        A = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
        grids = [np.sort(rng.normal(size=40)) for _ in range(3)]
        Y = rng.normal(size=(10, 2)) * 3
        m = conditional_means(A, grids, Y, k=0)
        assert np.all(m >= grids[0].min()) and np.all(m <= grids[0].max())

    def test_monotone_in_outcome_for_deconvolution(self, rng):
        grids = [np.sort(rng.normal(size=60)), np.sort(rng.normal(size=60))]
        ys = np.linspace(-3, 3, 9)[:, None]
        m = conditional_means(np.array([[1.0, 1.0]]), grids, ys, k=0)
        assert np.all(np.diff(m) > 0)

    def test_vanishing_weights_warn(self):
        lf = [None, lambda v: np.full(np.shape(v), -np.inf)]
        with pytest.warns(RuntimeWarning):
            v = conditional_expectation(np.array([[1.0, 1.0]]), [np.arange(3.0), np.zeros(3)],
                                        [0.0], log_densities=lf)
        assert v == pytest.approx(1.0)

    def test_bad_complement(self):
        with pytest.raises(InvalidParameterError):
            conditional_expectation(np.array([[1.0, 1.0]]), [np.arange(3.0)] * 2, [0.0], k=0,
                                    c_columns=[0])

    def test_constrained_predictor(self):
        pm = np.array([0.3, -1.0, 2.0, 0.0])
        g = np.array([10.0, 20.0, 30.0, 40.0])
        np.testing.assert_array_equal(constrained_predictor(pm, g), [30.0, 10.0, 40.0, 20.0])

    def test_constrained_predictor_trivial_orders(self):
        g = np.array([1.0, 2.0, 4.0])
        np.testing.assert_array_equal(constrained_predictor([0.1, 0.2, 0.3], g), g)
        np.testing.assert_array_equal(constrained_predictor([0.3, 0.2, 0.1], g), g[::-1])

    def test_constrained_predictor_brute_force(self, rng):
        import itertools

        for _ in range(20):
            pm, g = rng.normal(size=5), np.sort(rng.normal(size=5))
            best = min(itertools.permutations(g), key=lambda p: np.sum((np.array(p) - pm) ** 2))
            np.testing.assert_allclose(constrained_predictor(pm, g), best)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=12))
    def test_constrained_predictor_is_best_permutation(self, pm):
        pm = np.array(pm)
        g = np.linspace(0, 1, pm.size)
        out = constrained_predictor(pm, g)
        np.testing.assert_array_equal(np.sort(out), g)
        rng = np.random.default_rng(0)
        best = np.sum((out - pm) ** 2)
        for _ in range(20):
            assert best <= np.sum((rng.permutation(g) - pm) ** 2) + 1e-12


class TestMoments:
    def test_moment(self):
        assert moment(np.square, [1.0, 2.0, 3.0]) == pytest.approx(14 / 3)
        assert moment(np.square, [-1.0, 1.0]) == 1.0
        assert abs(moment(lambda x: x, [-2.0, -0.5, 0.5, 2.0])) < 1e-12

    def test_cross_moment_identity(self):
        g = [np.array([1.0, 2.0]), np.array([10.0, 20.0])]
        sig = [np.arange(2), np.array([1, 0])]
        # pairs (1, 20) and (2, 10): E[X1 * Y] = (1*21 + 2*12) / 2
        v = cross_moment(lambda x, y: x * y, g, np.array([[1.0, 1.0]]), 0, 0, sigmas=sig)
        assert v == pytest.approx(22.5)


class TestSummaries:
    def test_one_to_hundred(self):
        s = dispersion_skewness(np.arange(1, 101))
        assert s.p10 == pytest.approx(10.1)
        assert s.p50 == pytest.approx(50.5)
        assert s.p90 == pytest.approx(90.9)
        assert s.bowley_kelley == pytest.approx(0.0, abs=1e-12)

    def test_dispersion_value(self):
        assert dispersion_skewness(np.arange(1, 101)).dispersion == pytest.approx(80.8)

    def test_symmetric_normal(self):
        # symmetrized seeded draw: the sample itself is symmetric about 0
        h = np.random.default_rng(1).standard_normal(500)
        s = dispersion_skewness(np.concatenate([h, -h]))
        assert abs(s.bowley_kelley) < 0.02

    def test_lognormal_right_skew(self):
        assert dispersion_skewness(np.random.default_rng(2).lognormal(size=500)).bowley_kelley > 0

    def test_skewed(self):
        s = dispersion_skewness(np.exp(np.linspace(0, 3, 50)))
        assert s.bowley_kelley > 0
        d = s.as_dict()
        assert d["dispersion"] == pytest.approx(d["upper"] + d["lower"])

    def test_quantile_clamped(self):
        assert empirical_quantile([1.0, 2.0, 3.0], 0.01) == 1.0

    def test_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            dispersion_skewness(np.ones(20))
        with pytest.raises(InvalidDimensionError):
            dispersion_skewness(np.arange(5.0))

    @given(st.floats(0.1, 10), st.floats(-10, 10))
    def test_affine_invariance(self, a, b):
        v = np.linspace(0, 1, 30) ** 2
        s0, s1 = dispersion_skewness(v), dispersion_skewness(a * v + b)
        assert s1.bowley_kelley == pytest.approx(s0.bowley_kelley, abs=1e-9)
        assert s1.dispersion == pytest.approx(a * s0.dispersion, rel=1e-9)


class TestHac:
    def test_matches_statsmodels(self, rng):
        n = 40
        X = np.column_stack([np.ones(n), rng.normal(size=n), np.arange(n)])
        y = X @ [1.0, 2.0, 0.1] + rng.normal(size=n)
        for lags in (0, 1, 3):
            ours = newey_west_ols(y, X, lags)
            ref = sm.OLS(y, X).fit(cov_type="HAC", cov_kwds={"maxlags": lags, "use_correction": False})
            np.testing.assert_allclose(ours.coef, ref.params, rtol=1e-10)
            np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-8)

    def test_white_at_zero_lags(self, rng):
        n = 30
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ [0.5, -1.0] + rng.normal(size=n) * (1 + np.abs(X[:, 1]))
        res = newey_west_ols(y, X, 0)
        e = y - X @ np.linalg.lstsq(X, y, rcond=None)[0]
        B = np.linalg.inv(X.T @ X)
        white = B @ (X.T * e**2) @ X @ B
        np.testing.assert_allclose(res.se, np.sqrt(np.diag(white)), rtol=1e-10)

    def test_ar1_errors_against_bartlett_loop(self):
        r = np.random.default_rng(5)
        n, L = 80, 2
        u = np.zeros(n)
        for t in range(1, n):
            u[t] = 0.6 * u[t - 1] + r.normal()
        X = np.column_stack([np.ones(n), r.normal(size=n), np.arange(n, dtype=float)])
        y = X @ [1.0, 0.5, 0.02] + u
        res = newey_west_ols(y, X, L)
        # normal equations and an explicit double loop over lagged score products
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        e = y - X @ beta
        S = np.zeros((3, 3))
        for t in range(n):
            for s_ in range(n):
                lag = abs(t - s_)
                if lag <= L:
                    S += (1 - lag / (L + 1)) * e[t] * e[s_] * np.outer(X[t], X[s_])
        B = np.linalg.inv(X.T @ X)
        np.testing.assert_allclose(res.coef, beta, rtol=1e-10)
        np.testing.assert_allclose(res.se, np.sqrt(np.diag(B @ S @ B)), rtol=1e-10)

    def test_exact_linear_zero_se(self):
        X = np.column_stack([np.ones(12), np.arange(12.0), np.arange(12.0) ** 2])
        res = newey_west_ols(X @ [1.0, 2.0, 3.0], X, 1)
        assert np.max(np.abs(res.resid)) < 1e-9 and np.max(res.se) < 1e-8

    def test_exact_fit(self):
        x = np.arange(10.0)
        r = cyclicality_regression(2 * x + 1, x ** 2, lags=1)
        assert r.coef[1] == pytest.approx(0, abs=1e-10)

    def test_errors(self, rng):
        with pytest.raises(CollinearityError):
            newey_west_ols(rng.normal(size=10), np.ones((10, 2)))
        with pytest.raises(InvalidDimensionError):
            newey_west_ols(np.zeros(3), np.ones((3, 2)))
        with pytest.raises(InvalidParameterError):
            newey_west_ols(rng.normal(size=10), rng.normal(size=(10, 1)), lags=-1)
