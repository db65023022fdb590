"""Latent factor distributions by optimal-transport matching."""

__version__ = "0.1.0"

from .assignment import Assignment, build_cost, match, solve_assignment, sort_match
from .estimator import (
    AveragedResult,
    EstimationResult,
    FitOptions,
    MatchingEstimator,
    fit,
    fit_averaged,
    mallows_fit,
    wasserstein_objective,
)
from .model import (
    ModelSpec,
    ShapeConstraints,
    check_identification,
    deconvolution_spec,
    default_constraints,
    fixed_effects_loading,
    fixed_effects_spec,
    permanent_transitory_loading,
    preset_constraints,
)
from .shape_ls import QuantileGrid, bounded_isotonic_fit, update_step

__all__ = [
    "Assignment", "build_cost", "match", "solve_assignment", "sort_match",
    "AveragedResult", "EstimationResult", "FitOptions", "MatchingEstimator", "fit",
    "fit_averaged", "mallows_fit", "wasserstein_objective", "ModelSpec", "ShapeConstraints",
    "check_identification", "deconvolution_spec", "default_constraints",
    "fixed_effects_loading", "fixed_effects_spec", "permanent_transitory_loading",
    "preset_constraints", "QuantileGrid", "bounded_isotonic_fit", "update_step",
]
