"""Command-line interface: ``latentmatch <subcommand> [options]``.

Settings come from an optional JSON config (``--config``) overridden by
flags. Every run writes its artifacts and a ``manifest.json`` (seed,
config, config hash, version, timings) into ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .estimator import FitOptions, MatchingEstimator, read_grids_csv, write_grids_csv
from .exceptions import InvalidInputError, InvalidParameterError, LatentMatchError
from .extensions import fit_heteroskedastic, fit_mixture, fit_random_trends
from .model import permanent_transitory_loading, fixed_effects_loading
from .panel import PanelData, first_difference, load_panel_csv, residualize, write_panel
from .post import (
    conditional_means,
    constrained_predictor,
    cyclicality_regression,
    dispersion_skewness,
    kernel_density,
)
from .simlab import penalization_sweep, preset_by_name, rate_study, run_mc

__all__ = [
    "RunConfig",
    "PanelData",
    "load_panel_csv",
    "write_panel",
    "residualize",
    "first_difference",
    "build_parser",
    "run",
    "main",
]

MODELS = ("fixed-effects", "permanent-transitory", "deconvolution", "mixture",
          "heteroskedastic", "random-trends")
PRESETS = ("strong", "weak", "default-c2")
STATS = ("dispersion", "upper", "lower", "bowley_kelley")


@dataclass
class RunConfig:
    """Validated settings of one CLI run; the JSON config uses the same keys."""

    command: str = "estimate"
    model: str = "fixed-effects"
    preset: str = "weak"
    seed: int = 0
    threads: int | None = None
    out: str = "out"
    n_starts: int = 1
    n_draws: int = 1
    max_iter: int = 200
    tol: float = 1e-8
    # simulation designs
    dgp: str = "beta(2,2)"
    N: int = 100
    T: int = 2
    reps: int = 100
    Ns: list = field(default_factory=lambda: [100, 200, 400, 800])
    uppers: list = field(default_factory=lambda: [2.0, 5.0, 10.0, 100.0])
    # data
    data: str | None = None
    layout: str = "auto"
    unit: str = "unit"
    time: str = "time"
    y: str = "y"
    covariates: list = field(default_factory=list)
    difference: bool = False
    noise: str | None = None
    scale: str = "s"
    # extensions
    G: int = 2
    R: int = 10
    lam: float = 10.0
    # post-processing
    grids: list = field(default_factory=list)
    column: str | None = None
    bandwidth: float | None = None
    k: int = 0
    macro: str | None = None
    lags: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidParameterError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.preset not in PRESETS:
            raise InvalidParameterError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError("seed must be an unsigned 64-bit integer")
        if self.threads is not None and int(self.threads) < 1:
            raise InvalidParameterError("threads must be >= 1")
        if isinstance(self.grids, str):
            self.grids = [self.grids]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def options(self) -> FitOptions:
        return FitOptions(max_iter=self.max_iter, tol=self.tol, n_starts=self.n_starts,
                          n_draws=self.n_draws, seed=int(self.seed))

    def n_jobs(self) -> int:
        return int(self.threads) if self.threads is not None else (os.cpu_count() or 1)

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- helpers


def _load_data(cfg: RunConfig) -> PanelData:
    if cfg.data is None:
        raise InvalidParameterError("--data is required")
    panel = load_panel_csv(cfg.data, cfg.unit, cfg.time, cfg.y, cfg.covariates, cfg.layout)
    if cfg.covariates:
        cov = panel.covariates
        Y = panel.Y.copy()
        for t in range(panel.T):
            Y[:, t] = residualize(Y[:, t], {c: (v[:, t] if np.ndim(v) == 2 else v)
                                            for c, v in cov.items()})
        panel = PanelData(panel.units, Y, panel.times, cov, panel.dropped)
    if cfg.difference:
        panel = first_difference(panel)
    return panel


def _read_column(path, name=None) -> np.ndarray:
    """One numeric column of a CSV with a header (the last column by default)."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    names = data.dtype.names
    col = name if name is not None else names[-1]
    if col not in names:
        raise InvalidInputError(f"{path}: no column {col!r}")
    v = np.atleast_1d(np.asarray(data[col], dtype=float))
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{path}: non-finite values in {col!r}")
    return v


def _loading(model: str, T: int) -> np.ndarray:
    if model == "fixed-effects":
        return fixed_effects_loading(T)
    if model == "permanent-transitory":
        return permanent_transitory_loading(T)
    if model == "deconvolution":
        return np.array([[1.0, 1.0]])
    raise InvalidParameterError(f"model {model!r} has no fixed loading matrix")


def _write_trace(path, traces) -> None:
    with open(path, "w") as fh:
        fh.write("draw,iteration,objective\n")
        for m, tr in enumerate(traces):
            for i, v in enumerate(tr):
                fh.write(f"{m},{i},{float(v):.17g}\n")


def _write_kv(path, d: dict) -> None:
    with open(path, "w") as fh:
        fh.write("key,value\n")
        for k, v in d.items():
            fh.write(f"{k},{float(v):.6g}\n")


def _estimator(cfg: RunConfig, model) -> MatchingEstimator:
    return MatchingEstimator(model=model, preset=cfg.preset, n_starts=cfg.n_starts,
                             n_draws=cfg.n_draws, max_iter=cfg.max_iter, tol=cfg.tol,
                             random_state=int(cfg.seed), n_jobs=cfg.n_jobs())


def _constraints(cfg: RunConfig):
    if cfg.preset == "default-c2":
        raise InvalidParameterError(f"preset 'default-c2' is not available for model {cfg.model!r}")
    return preset_by_name(cfg.preset)


# ---------------------------------------------------------------- subcommands


def cmd_simulate(cfg: RunConfig) -> list:
    if cfg.model not in ("fixed-effects", "deconvolution"):
        raise InvalidParameterError("simulate supports fixed-effects and deconvolution")
    dgp = cfg.dgp
    if cfg.model == "deconvolution" and dgp.startswith("ekg"):
        dgp = [dgp, "normal"]
    rep = run_mc(cfg.model, dgp, cfg.N, cfg.T, cfg.reps, cfg.preset, cfg.options(),
                 int(cfg.seed), n_jobs=cfg.n_jobs())
    rep.write(cfg.out)
    return ["metrics.csv", "summary.csv", "quantile_envelope.csv", "density_envelope.csv"]


def cmd_estimate(cfg: RunConfig) -> list:
    out = cfg.out
    if cfg.model == "heteroskedastic":
        if cfg.data is None:
            raise InvalidParameterError("--data is required")
        y = _read_column(cfg.data, cfg.y)
        s = _read_column(cfg.data, cfg.scale)
        if cfg.noise is not None:
            x2 = _read_column(cfg.noise)
        else:
            x2 = np.random.default_rng(int(cfg.seed)).standard_normal(y.size)
        res = fit_heteroskedastic(y, s, x2, lam=cfg.lam, constraints=_constraints(cfg),
                                  options=cfg.options())
        res.to_csv(os.path.join(out, "grids.csv"))
        _write_trace(os.path.join(out, "trace.csv"), [res.objective_trace])
        _write_kv(os.path.join(out, "objective.csv"),
                  {"objective": res.objective, "outcome_term": res.outcome_term,
                   "penalty_term": res.penalty_term})
        return ["grids.csv", "trace.csv", "objective.csv"]

    panel = _load_data(cfg)
    Y = panel.Y
    if cfg.model == "mixture":
        res = fit_mixture(Y, G=cfg.G, R=cfg.R, constraints=_constraints(cfg),
                          options=cfg.options())
        res.to_csv(os.path.join(out, "grids.csv"))
        _write_trace(os.path.join(out, "trace.csv"), [res.objective_trace])
        with open(os.path.join(out, "thresholds.csv"), "w") as fh:
            fh.write("candidate," + ",".join(f"mu{g + 1}" for g in range(cfg.G - 1)) + ",objective\n")
            for j, (mu, v) in enumerate(zip(res.candidates, res.candidate_objectives)):
                fh.write(f"{j}," + ",".join(f"{m:.17g}" for m in mu) + f",{v:.17g}\n")
        return ["grids.csv", "trace.csv", "thresholds.csv"]
    if cfg.model == "random-trends":
        res = fit_random_trends(Y, constraints=_constraints(cfg), options=cfg.options())
        with open(os.path.join(out, "coefficients.csv"), "w") as fh:
            fh.write("index,alpha,beta\n")
            for i, (a, b) in enumerate(zip(res.alpha, res.beta)):
                fh.write(f"{i + 1},{a:.17g},{b:.17g}\n")
        write_grids_csv(os.path.join(out, "grids.csv"), res.eps_grids,
                        tuple(f"eps{t}" for t in panel.times))
        _write_trace(os.path.join(out, "trace.csv"), [res.objective_trace])
        return ["coefficients.csv", "grids.csv", "trace.csv"]

    noise = None
    if cfg.model == "deconvolution":
        if Y.shape[1] != 1:
            raise InvalidInputError("deconvolution needs a single outcome column")
        if cfg.noise is None:
            raise InvalidParameterError("deconvolution needs --noise (a sample of the error)")
        noise = _read_column(cfg.noise)
        model = "deconvolution"
    elif cfg.model == "fixed-effects":
        model = "fixed-effects"
    else:
        model = _loading(cfg.model, Y.shape[1])
    est = _estimator(cfg, model).fit(Y, noise=noise)
    est.result_.to_csv(os.path.join(out, "grids.csv"))
    _write_trace(os.path.join(out, "trace.csv"), [d.objective_trace for d in est.result_.draws])
    with open(os.path.join(out, "start_objectives.csv"), "w") as fh:
        so = est.result_.start_objectives
        fh.write("draw," + ",".join(f"start{s}" for s in range(so.shape[1])) + "\n")
        for m, row in enumerate(so):
            fh.write(f"{m}," + ",".join(f"{v:.17g}" for v in row) + "\n")
    if panel.dropped:
        print(f"dropped {panel.dropped} units with missing outcomes", file=sys.stderr)
    return ["grids.csv", "trace.csv", "start_objectives.csv"]


def _grid_column(path, column):
    grids, labels = read_grids_csv(path)
    col = column if column is not None else labels[0]
    if col not in labels:
        raise InvalidInputError(f"{path}: no grid column {col!r}")
    return grids[labels.index(col)]


def cmd_density(cfg: RunConfig) -> list:
    if len(cfg.grids) != 1:
        raise InvalidParameterError("density needs exactly one --grids file")
    g = _grid_column(cfg.grids[0], cfg.column)
    dens = kernel_density(g, cfg.bandwidth)
    dens.to_csv(os.path.join(cfg.out, "density.csv"))
    stats = dispersion_skewness(g)
    _write_kv(os.path.join(cfg.out, "summary.csv"),
              dict(stats.as_dict(), bandwidth=dens.bandwidth, integral=dens.integral()))
    return ["density.csv", "summary.csv"]


def cmd_predict(cfg: RunConfig) -> list:
    if len(cfg.grids) != 1:
        raise InvalidParameterError("predict needs exactly one --grids file")
    grids, _ = read_grids_csv(cfg.grids[0])
    panel = _load_data(cfg)
    A = _loading(cfg.model, panel.T)
    if len(grids) != A.shape[1]:
        raise InvalidInputError(f"expected {A.shape[1]} grids for model {cfg.model!r}")
    post = conditional_means(A, grids, panel.Y, cfg.k, seed=int(cfg.seed))
    ranked = (constrained_predictor(post, grids[cfg.k]) if len(grids[cfg.k]) == post.size
              else np.full(post.size, np.nan))
    with open(os.path.join(cfg.out, "predictions.csv"), "w") as fh:
        fh.write("unit,posterior_mean,constrained\n")
        for u, a, b in zip(panel.units, post, ranked):
            fh.write(f"{u},{a:.17g},{b:.17g}\n")
    return ["predictions.csv"]


def cmd_cyclicality(cfg: RunConfig) -> list:
    if len(cfg.grids) < 4:
        raise InvalidParameterError("cyclicality needs one --grids file per period (at least 4)")
    if cfg.macro is None:
        raise InvalidParameterError("cyclicality needs --macro")
    macro = _read_column(cfg.macro)
    if macro.size != len(cfg.grids):
        raise InvalidInputError("the macro series needs one value per grid file")
    stats = [dispersion_skewness(_grid_column(p, cfg.column)) for p in cfg.grids]
    with open(os.path.join(cfg.out, "period_stats.csv"), "w") as fh:
        keys = list(stats[0].as_dict())
        fh.write("period," + ",".join(keys) + ",macro\n")
        for j, (s, m) in enumerate(zip(stats, macro)):
            fh.write(f"{j}," + ",".join(f"{v:.6g}" for v in s.as_dict().values()) + f",{m:.6g}\n")
    with open(os.path.join(cfg.out, "cyclicality.csv"), "w") as fh:
        fh.write("statistic,coef_macro,se_macro,coef_trend,se_trend,coef_const,se_const,n\n")
        for name in STATS:
            series = np.array([getattr(s, name) for s in stats])
            r = cyclicality_regression(series, macro, lags=cfg.lags, trend=True)
            fh.write(f"{name},{r.coef[1]:.6g},{r.se[1]:.6g},{r.coef[2]:.6g},{r.se[2]:.6g},"
                     f"{r.coef[0]:.6g},{r.se[0]:.6g},{series.size}\n")
    return ["period_stats.csv", "cyclicality.csv"]


def cmd_rate_study(cfg: RunConfig) -> list:
    res = rate_study(cfg.dgp, cfg.Ns, cfg.reps, preset=cfg.preset, options=cfg.options(),
                     seed=int(cfg.seed), n_jobs=cfg.n_jobs())
    res.write(os.path.join(cfg.out, "rate_study.csv"))
    return ["rate_study.csv"]


def cmd_sweep(cfg: RunConfig) -> list:
    res = penalization_sweep(cfg.dgp, cfg.N, cfg.uppers, cfg.reps, options=cfg.options(),
                             seed=int(cfg.seed), n_jobs=cfg.n_jobs())
    res.write(os.path.join(cfg.out, "sweep.csv"))
    return ["sweep.csv"]


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "density": cmd_density,
    "predict": cmd_predict,
    "cyclicality": cmd_cyclicality,
    "rate-study": cmd_rate_study,
    "sweep": cmd_sweep,
}


def run(cfg: RunConfig) -> dict:
    """Execute one subcommand and write ``manifest.json``; returns the manifest."""
    if cfg.command not in COMMANDS:
        raise InvalidParameterError(f"unknown command {cfg.command!r}")
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.perf_counter()
    outputs = COMMANDS[cfg.command](cfg)
    manifest = {
        "command": cfg.command,
        "seed": int(cfg.seed),
        "config": cfg.as_dict(),
        "config_hash": cfg.digest(),
        "version": __version__,
        "numpy": np.__version__,
        "outputs": outputs,
        "timings": {"total_seconds": round(time.perf_counter() - t0, 3)},
    }
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------- argument parsing


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=PRESETS, help="constraint preset")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--n-draws", dest="n_draws", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)


def _add_data(p):
    p.add_argument("--data", help="panel CSV (long: unit,time,y; wide: unit,y1..yT)")
    p.add_argument("--layout", choices=("auto", "long", "wide"))
    p.add_argument("--unit")
    p.add_argument("--time")
    p.add_argument("--y")
    p.add_argument("--covariates", nargs="+", help="categorical columns to net out")
    p.add_argument("--difference", action="store_true", default=None,
                   help="use first differences of the outcomes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentmatch",
                                     description="Matching estimators for latent factor models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo study of a design")
    _add_common(p)
    p.add_argument("--dgp")
    p.add_argument("--N", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--reps", type=int)

    p = sub.add_parser("estimate", help="fit a model to a data file")
    _add_common(p)
    _add_data(p)
    p.add_argument("--noise", help="CSV with a sample of the error (deconvolution)")
    p.add_argument("--scale", help="noise-scale column (heteroskedastic)")
    p.add_argument("--G", type=int)
    p.add_argument("--R", type=int)
    p.add_argument("--lam", type=float)

    p = sub.add_parser("density", help="kernel density of a fitted grid")
    _add_common(p)
    p.add_argument("--grids", nargs="+")
    p.add_argument("--column")
    p.add_argument("--bandwidth", type=float)

    p = sub.add_parser("predict", help="posterior means of a factor per unit")
    _add_common(p)
    _add_data(p)
    p.add_argument("--grids", nargs="+")
    p.add_argument("--k", type=int, help="factor index (0-based)")

    p = sub.add_parser("cyclicality", help="regress quantile statistics on a macro series")
    _add_common(p)
    p.add_argument("--grids", nargs="+", help="one grid CSV per period, in time order")
    p.add_argument("--column")
    p.add_argument("--macro", help="CSV with the macro series (last column)")
    p.add_argument("--lags", type=int)

    p = sub.add_parser("rate-study", help="quantile MSE across sample sizes")
    _add_common(p)
    p.add_argument("--dgp")
    p.add_argument("--Ns", type=int, nargs="+")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("sweep", help="quantile MSE across penalization levels")
    _add_common(p)
    p.add_argument("--dgp")
    p.add_argument("--N", type=int)
    p.add_argument("--uppers", type=float, nargs="+")
    p.add_argument("--reps", type=int)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(values, dict):
            raise InvalidInputError("config must be a JSON object")
        values = dict(values)
    for key, v in vars(args).items():
        if key == "config" or v is None:
            continue
        values[key] = v
    return RunConfig.from_dict(values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        run(cfg)
    except (LatentMatchError, OSError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
