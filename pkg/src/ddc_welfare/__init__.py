"""Weighted average welfare in finite-state dynamic discrete choice models.

The target is theta0 = E[w(x) V(x)] under the stationary law of the
controlled chain. The package solves models exactly, simulates data,
estimates the nuisances (CCPs, transition kernel, lambda) with
cross-fitting, and evaluates a plug-in moment alongside bias-corrected
orthogonal moments.
"""

from .bellman import (CCPOperator, ValueFunction, kress_error_bound, operator_norm_diagnostics,
                      policy_matrix, solve_value_ccp, solve_value_emax)
from .diagnostics import (ExperimentConfig, VariantSpec, random_model, reference_model,
                          run_coverage, run_double_robustness_check, run_lemma_suite,
                          run_orthogonality_check)
from .estimator import EstimateReport, cross_fit_estimate, evaluate_moment, population_mean
from .exceptions import (ConvergenceError, DDCError, EstimationError, ModelValidationError,
                         ReducibleChainError, UnsupportedVariantError)
from .first_stage import FirstStageConfig, NuisanceSet, fit_folds, oracle_nuisances
from .model import EULER_GAMMA, ModelSpec, StateSpace, emax_logit, expected_current_utility
from .simulator import Dataset, ModelSolution, simulate, solve_truth, true_theta
from .stationary import backward_kernel, solve_lambda, stationary_distribution
from .weights import WeightSpec, build_constant_weight, build_counterfactual_weight

__version__ = "0.1.0"

__all__ = [
    "CCPOperator", "ConvergenceError", "DDCError", "Dataset", "EULER_GAMMA",
    "EstimateReport", "EstimationError", "ExperimentConfig", "FirstStageConfig",
    "ModelSolution", "ModelSpec", "ModelValidationError", "NuisanceSet",
    "ReducibleChainError", "StateSpace", "UnsupportedVariantError", "ValueFunction",
    "VariantSpec", "WeightSpec", "backward_kernel", "build_constant_weight",
    "build_counterfactual_weight", "cross_fit_estimate", "emax_logit", "evaluate_moment",
    "expected_current_utility", "fit_folds", "kress_error_bound",
    "operator_norm_diagnostics", "oracle_nuisances", "policy_matrix", "population_mean",
    "random_model", "reference_model", "run_coverage", "run_double_robustness_check",
    "run_lemma_suite", "run_orthogonality_check", "simulate", "solve_lambda", "solve_truth",
    "solve_value_ccp", "solve_value_emax", "stationary_distribution", "true_theta",
]
