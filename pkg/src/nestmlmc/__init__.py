"""Single-level and multilevel estimators of nested expectations."""

from .bell import (BellCoefficientTable, b_coefficients, centered_mean_moment, complete_bell,
                   moments_from_cumulants, partial_bell)
from .calibrate import CalibrationInput, CalibrationPlan, plan, theoretical_cost
from .estimator import (Allocation, CouplingMode, EstimateResult, LevelGeometry, LevelStats,
                        estimate_crude, estimate_ml2r, estimate_mlmc, level_difference_sample)
from .model import (AnalyticOracles, EvaluationError, NestedModel, Payoff, PayoffKind,
                    StreamKey, build_model, builtin_bs_nested, builtin_gaussian_linear)
from .rates import (RateReport, fit_strong_rate, fit_weak_rate, indicator_strong_bound,
                    strong_bound_xh)
from .weights import WeightSpec, WeightVector, solve_weights

__version__ = "0.1.0"

__all__ = [
    "AnalyticOracles", "Allocation", "BellCoefficientTable", "CalibrationInput",
    "CalibrationPlan", "CouplingMode", "EstimateResult", "EvaluationError", "LevelGeometry",
    "LevelStats", "NestedModel", "Payoff", "PayoffKind", "RateReport", "StreamKey",
    "WeightSpec", "WeightVector", "b_coefficients", "build_model", "builtin_bs_nested",
    "builtin_gaussian_linear", "centered_mean_moment", "complete_bell", "estimate_crude",
    "estimate_ml2r", "estimate_mlmc", "fit_strong_rate", "fit_weak_rate",
    "indicator_strong_bound", "level_difference_sample", "moments_from_cumulants",
    "partial_bell", "plan", "solve_weights", "strong_bound_xh", "theoretical_cost",
]
