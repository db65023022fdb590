"""Data-generating processes and Monte Carlo studies."""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from . import __version__
from .estimator import FitOptions, _stream, data_scaled_spec, derive_seed, fit_averaged
from .exceptions import InvalidParameterError, LatentMatchError
from .model import (
    ModelSpec,
    deconvolution_spec,
    fixed_effects_spec,
    preset_constraints,
    sweep_constraints,
)
from .post import empirical_quantile, kernel_density

FAMILIES = ("beta", "normal", "lognormal", "ekg")
_TAIL = 1e-7
_E = np.e


@dataclass(frozen=True)
class DgpSpec:
    """A standardized latent distribution.

    ``beta`` and ``lognormal`` are shifted and scaled to mean zero and unit
    variance; ``ekg`` is the mixture ``6/7 N(0, 1/2) + 1/7 U[0, 6]``.
    """

    family: str
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameterError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.family == "beta" and not (self.a > 0 and self.b > 0):
            raise InvalidParameterError("beta shape parameters must be positive")

    @classmethod
    def parse(cls, text: str) -> "DgpSpec":
        """Parse ``"beta(2,2)"``, ``"normal"``, ``"lognormal"`` or ``"ekg"``."""
        t = text.strip().lower().replace(" ", "")
        m = re.fullmatch(r"beta\(([\d.eE+-]+),([\d.eE+-]+)\)", t)
        if m:
            return cls("beta", float(m.group(1)), float(m.group(2)))
        aliases = {"beta": "beta", "normal": "normal", "gaussian": "normal",
                   "lognormal": "lognormal", "log-normal": "lognormal",
                   "ekg": "ekg", "efron_koenker_gu": "ekg"}
        if t not in aliases:
            raise InvalidParameterError(f"cannot parse distribution {text!r}")
        return cls(aliases[t])

    @property
    def label(self) -> str:
        if self.family == "beta":
            return f"beta({self.a:g},{self.b:g})"
        return self.family

    def _dist(self):
        if self.family == "beta":
            m = self.a / (self.a + self.b)
            sd = np.sqrt(self.a * self.b / ((self.a + self.b) ** 2 * (self.a + self.b + 1)))
            return stats.beta(self.a, self.b, loc=-m / sd, scale=1.0 / sd)
        if self.family == "normal":
            return stats.norm()
        if self.family == "lognormal":
            s = np.sqrt(_E * (_E - 1.0))
            return stats.lognorm(s=1.0, loc=-np.exp(0.5) / s, scale=1.0 / s)
        return None

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.family == "beta":
            m = self.a / (self.a + self.b)
            sd = np.sqrt(self.a * self.b / ((self.a + self.b) ** 2 * (self.a + self.b + 1)))
            return (rng.beta(self.a, self.b, n) - m) / sd
        if self.family == "normal":
            return rng.standard_normal(n)
        if self.family == "lognormal":
            return (np.exp(rng.standard_normal(n)) - np.exp(0.5)) / np.sqrt(_E * (_E - 1.0))
        unif = rng.random(n) < 1.0 / 7.0
        return np.where(unif, rng.uniform(0.0, 6.0, n), np.sqrt(0.5) * rng.standard_normal(n))

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family != "ekg":
            return self._dist().pdf(x)
        u = np.where((x > 0) & (x < 6), 1.0 / 6.0, 0.0)
        u = np.where((x == 0) | (x == 6), 1.0 / 12.0, u)
        return 6.0 / 7.0 * stats.norm.pdf(x, scale=np.sqrt(0.5)) + u / 7.0

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family != "ekg":
            return self._dist().cdf(x)
        return 6.0 / 7.0 * stats.norm.cdf(x, scale=np.sqrt(0.5)) + np.clip(x / 6.0, 0, 1) / 7.0

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.family != "ekg":
            return self._dist().ppf(u)
        from scipy.optimize import brentq

        flat = [brentq(lambda z, p=p: float(self.cdf(z)) - p, -20.0, 20.0, xtol=1e-14)
                for p in u.ravel()]
        return np.array(flat).reshape(u.shape)

    @property
    def mean(self) -> float:
        return 3.0 / 7.0 if self.family == "ekg" else 0.0

    def support(self) -> tuple[float, float]:
        """Support, with unbounded ends cut at tail probability 1e-7."""
        if self.family == "ekg":
            return float(self.ppf(_TAIL)), 6.0
        lo, hi = self._dist().support()
        if not np.isfinite(lo):
            lo = float(self.ppf(_TAIL))
        if not np.isfinite(hi):
            hi = float(self._dist().isf(_TAIL))
        return float(lo), float(hi)

    def metric_grid(self, n: int = 512, tol: float = 1e-6, max_n: int = 1 << 16) -> np.ndarray:
        """Equispaced grid over the support widened by 1 on each side.

        The point count starts at ``n`` and doubles until the analytic density
        integrates to one within ``tol`` (only heavy-tailed families need more).
        """
        lo, hi = self.support()
        while True:
            x = np.linspace(lo - 1.0, hi + 1.0, n)
            if abs(trapezoid(self.pdf(x), x) - 1.0) <= tol or n >= max_n:
                return x
            n *= 2


def draw_dgp(spec: DgpSpec, n_draws: int, stream) -> np.ndarray:
    """``n_draws`` i.i.d. draws; ``stream`` is a Generator or an integer seed."""
    rng = stream if isinstance(stream, np.random.Generator) else np.random.default_rng(stream)
    return spec.draw(int(n_draws), rng)


def _as_dgp(d) -> DgpSpec:
    return d if isinstance(d, DgpSpec) else DgpSpec.parse(str(d))


def preset_by_name(name: str, zero_mean=()):
    if name.startswith("sweep:"):
        return sweep_constraints(float(name.split(":", 1)[1]), zero_mean)
    return preset_constraints(name, zero_mean)


def simulate_panel(model: str, dgps, N: int, T: int, rng: np.random.Generator):
    """Outcomes and the true latent draws for a fixed-effects or deconvolution design.

    For deconvolution the second element of the return value holds an
    independent noise sample of size ``N`` (the known error distribution).
    """
    if model == "fixed-effects":
        K = T + 1
        dgps = list(dgps) if isinstance(dgps, (list, tuple)) else [dgps] * K
        X = np.column_stack([draw_dgp(_as_dgp(dgps[k]), N, rng) for k in range(K)])
        A = np.hstack([np.ones((T, 1)), np.eye(T)])
        return X @ A.T, None, X
    if model == "deconvolution":
        dgps = list(dgps) if isinstance(dgps, (list, tuple)) else [dgps] * 2
        x1 = draw_dgp(_as_dgp(dgps[0]), N, rng)
        x2 = draw_dgp(_as_dgp(dgps[1]), N, rng)
        noise = draw_dgp(_as_dgp(dgps[1]), N, rng)
        return (x1 + x2)[:, None], noise, np.column_stack([x1, x2])
    raise InvalidParameterError(f"unknown model {model!r}")


def model_spec(model: str, T: int, preset: str) -> ModelSpec:
    """Design spec; ``"default-c2"`` returns the weak preset, rescaled per data set later."""
    if preset == "default-c2":
        preset = "weak"
    if model == "fixed-effects":
        return fixed_effects_spec(T, preset_by_name(preset))
    if model == "deconvolution":
        return deconvolution_spec(preset_by_name(preset))
    raise InvalidParameterError(f"unknown model {model!r}")


def fit_design(model, Y, noise, spec, options):
    frozen = [noise if f else None for f in spec.frozen]
    return fit_averaged(Y, spec, options, frozen_grids=frozen)


@dataclass
class McReport:
    """Per-replication metrics and aggregate curves for factor 1."""

    config: dict
    metrics: list
    failures: int
    ranks: np.ndarray
    true_quantiles: np.ndarray
    quantile_curves: np.ndarray
    metric_grid: np.ndarray
    true_density: np.ndarray
    density_curves: np.ndarray
    quantile_levels: tuple = (0.25, 0.5, 0.75)
    timings: dict = field(default_factory=dict)

    def _col(self, name):
        return np.array([m[name] for m in self.metrics])

    @property
    def mise(self) -> float:
        return float(np.mean(self._col("ise")))

    @property
    def miae(self) -> float:
        return float(np.mean(self._col("iae")))

    def quantile_mse(self) -> dict:
        return {p: float(np.mean(self._col(f"q{int(round(100 * p))}_se")))
                for p in self.quantile_levels}

    def summary(self) -> dict:
        out = {"reps": len(self.metrics), "failures": self.failures,
               "mise": self.mise, "miae": self.miae}
        for p, v in self.quantile_mse().items():
            out[f"q{int(round(100 * p))}_mse"] = v
        return out

    @staticmethod
    def _envelope(curves):
        return (curves.mean(axis=0), np.quantile(curves, 0.1, axis=0),
                np.quantile(curves, 0.9, axis=0))

    def write(self, out_dir) -> None:
        """Write metrics, summary, envelope CSVs and a manifest into ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        keys = list(self.metrics[0].keys()) if self.metrics else ["rep"]
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(",".join(keys) + "\n")
            for m in self.metrics:
                fh.write(",".join(_fmt6(m[k]) for k in keys) + "\n")
        with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
            fh.write("key,value\n")
            for k, v in self.summary().items():
                fh.write(f"{k},{_fmt6(v)}\n")
        for name, xs, truth, curves in (
            ("quantile_envelope.csv", self.ranks, self.true_quantiles, self.quantile_curves),
            ("density_envelope.csv", self.metric_grid, self.true_density, self.density_curves),
        ):
            mean, q10, q90 = self._envelope(curves)
            with open(os.path.join(out_dir, name), "w") as fh:
                fh.write("x,true,mean,q10,q90\n")
                for row in zip(xs, truth, mean, q10, q90):
                    fh.write(",".join(_fmt6(v) for v in row) + "\n")
        manifest = {"config": self.config, "version": __version__,
                    "numpy": np.__version__, "failures": self.failures}
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt6(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def _one_rep(r, model, dgps, N, T, spec, options, seed, levels, xgrid, truth_q, truth_f,
             scaled=False):
    rng = _stream(seed, 2, r)
    Y, noise, _ = simulate_panel(model, dgps, N, T, rng)
    if scaled:
        spec = data_scaled_spec(spec, Y, [noise if f else None for f in spec.frozen])
    opts = replace(options, seed=derive_seed(seed, 3, r))
    res = fit_design(model, Y, noise, spec, opts)
    grid = res.grids[0]
    dens = kernel_density(grid, eval_points=xgrid)
    fdiff = dens.density - truth_f
    # hygiene is checked on the estimate's own range (min/max +- 5 bandwidths)
    ext = kernel_density(grid, dens.bandwidth)
    q = empirical_quantile(grid, levels)
    row = {"rep": r, "ise": float(trapezoid(fdiff ** 2, xgrid)),
           "iae": float(trapezoid(np.abs(fdiff), xgrid)),
           "density_integral": ext.integral(),
           "density_min": float(min(dens.density.min(), ext.density.min()))}
    for p, qe, qt in zip(levels, q, truth_q):
        row[f"q{int(round(100 * p))}_se"] = float((qe - qt) ** 2)
    return row, grid, dens.density


def run_mc(model: str, dgp, N: int, T: int, reps: int, preset: str = "weak",
           options: FitOptions | None = None, seed: int = 0,
           quantile_levels=(0.25, 0.5, 0.75), n_jobs: int | None = None,
           max_failure_rate: float = 0.05) -> McReport:
    """Monte Carlo study of the factor-1 estimates.

    Replication ``r`` simulates data from stream ``(seed, 2, r)`` and fits with
    seed ``derive_seed(seed, 3, r)``, so results do not depend on ``n_jobs``.
    Failed fits are skipped and counted; exceeding ``max_failure_rate`` raises.
    """
    if reps < 1:
        raise InvalidParameterError("reps must be >= 1")
    options = options or FitOptions()
    dgps = [_as_dgp(d) for d in dgp] if isinstance(dgp, (list, tuple)) else _as_dgp(dgp)
    target = dgps[0] if isinstance(dgps, list) else dgps
    spec = model_spec(model, T if model == "fixed-effects" else 1, preset)
    levels = tuple(float(p) for p in quantile_levels)
    xgrid = target.metric_grid()
    truth_f = target.pdf(xgrid)
    ranks = np.arange(1, N + 1) / (N + 1)
    truth_q = target.ppf(np.array(levels))
    args = (model, dgps, N, T, spec, options, seed, levels, xgrid, truth_q, truth_f,
            preset == "default-c2")
    t0 = time.perf_counter()

    def safe(r):
        try:
            return _one_rep(r, *args)
        except (LatentMatchError, RuntimeError, np.linalg.LinAlgError) as exc:
            return exc

    if n_jobs is not None and n_jobs != 1:
        from joblib import Parallel, delayed

        outs = Parallel(n_jobs=n_jobs)(delayed(safe)(r) for r in range(reps))
    else:
        outs = [safe(r) for r in range(reps)]
    good = [o for o in outs if not isinstance(o, Exception)]
    failures = reps - len(good)
    if failures > max_failure_rate * reps:
        raise RuntimeError(f"{failures} of {reps} replications failed; first error: "
                           f"{next(o for o in outs if isinstance(o, Exception))!r}")
    config = {"model": model, "dgp": [d.label for d in dgps] if isinstance(dgps, list) else dgps.label,
              "N": N, "T": T, "reps": reps, "preset": preset, "seed": seed,
              "options": options.as_dict(), "quantile_levels": list(levels)}
    return McReport(
        config=config,
        metrics=[g[0] for g in good],
        failures=failures,
        ranks=ranks,
        true_quantiles=target.ppf(ranks),
        quantile_curves=np.array([g[1] for g in good]),
        metric_grid=xgrid,
        true_density=truth_f,
        density_curves=np.array([g[2] for g in good]),
        quantile_levels=levels,
        timings={"seconds": time.perf_counter() - t0},
    )


def implied_rate(Ns, mse) -> float:
    """Slope of the OLS regression of log MSE on log N."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log(np.asarray(mse, dtype=float))
    if np.unique(x).size < 2:
        raise InvalidParameterError("need at least two distinct sample sizes")
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class RateStudy:
    Ns: tuple
    quantile_levels: tuple
    mse: np.ndarray
    rates: np.ndarray
    reports: list = field(default_factory=list, repr=False)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("N," + ",".join(f"q{int(round(100 * p))}_mse" for p in self.quantile_levels) + "\n")
            for N, row in zip(self.Ns, self.mse):
                fh.write(f"{N}," + ",".join(_fmt6(v) for v in row) + "\n")
            fh.write("rate," + ",".join(_fmt6(v) for v in self.rates) + "\n")


def rate_study(dgp, Ns, reps: int, quantile_levels=(0.25, 0.5, 0.75), preset: str = "weak",
               options: FitOptions | None = None, seed: int = 0,
               n_jobs: int | None = None) -> RateStudy:
    """Quantile MSE of deconvolution estimates across sample sizes and the implied rates."""
    Ns = tuple(int(n) for n in Ns)
    if len(set(Ns)) < 3:
        raise InvalidParameterError("need at least three distinct sample sizes")
    options = options or FitOptions()
    reports = [run_mc("deconvolution", dgp, N, 1, reps, preset, options,
                      derive_seed(seed, 4, N), quantile_levels, n_jobs) for N in Ns]
    mse = np.array([[r.quantile_mse()[p] for p in r.quantile_levels] for r in reports])
    rates = np.array([implied_rate(Ns, mse[:, j]) for j in range(mse.shape[1])])
    return RateStudy(Ns, tuple(quantile_levels), mse, rates, reports)


@dataclass
class SweepResult:
    upper: tuple
    quantile_levels: tuple
    mse: np.ndarray
    se: np.ndarray

    def write(self, path) -> None:
        with open(path, "w") as fh:
            cols = []
            for p in self.quantile_levels:
                tag = f"q{int(round(100 * p))}"
                cols += [f"{tag}_mse", f"{tag}_se"]
            fh.write("upper," + ",".join(cols) + "\n")
            for c, m, s in zip(self.upper, self.mse, self.se):
                vals = [v for pair in zip(m, s) for v in pair]
                fh.write(f"{_fmt6(c)}," + ",".join(_fmt6(v) for v in vals) + "\n")


def penalization_sweep(dgp, N: int, uppers, reps: int, quantile_levels=(0.25, 0.5, 0.75),
                       options: FitOptions | None = None, seed: int = 0,
                       n_jobs: int | None = None) -> SweepResult:
    """Quantile MSEs of deconvolution fits across the family ``slope_lower = 1 / upper``.

    The same simulated data are used for every penalization level.
    """
    uppers = tuple(float(c) for c in uppers)
    if any(not c > 1 for c in uppers):
        raise InvalidParameterError("penalization constants must exceed 1")
    options = options or FitOptions()
    mse, se = [], []
    for c in uppers:
        rep = run_mc("deconvolution", dgp, N, 1, reps, f"sweep:{c!r}", options, seed,
                     quantile_levels, n_jobs)
        cols = np.array([[m[f"q{int(round(100 * p))}_se"] for p in rep.quantile_levels]
                         for m in rep.metrics])
        mse.append(cols.mean(axis=0))
        se.append(cols.std(axis=0, ddof=1) / np.sqrt(cols.shape[0]) if cols.shape[0] > 1
                  else np.full(cols.shape[1], np.nan))
    return SweepResult(uppers, tuple(quantile_levels), np.array(mse), np.array(se))
