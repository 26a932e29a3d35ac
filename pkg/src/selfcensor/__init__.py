"""Estimation for multivariate outcomes with self-censoring nonmonotone
missingness: identification oracles, inverse-propensity / regression /
doubly robust estimating-equation pipelines, and a Monte Carlo harness."""

from .data import DataError, Dataset, read_csv, round_trip, write_csv
from .eesolve import (Block, BootstrapError, BootstrapResult,
                      EstimatingSystem, SingularJacobianError, SolveResult,
                      bootstrap, fd_jacobian, sandwich_covariance, solve,
                      wald_ci)
from .estimators import (EstimationResult, Functional, PatternError, estimate,
                         estimate_dr, estimate_ipw, estimate_mar_benchmark,
                         estimate_reg, mean_functional,
                         risk_difference_functional)
from .models import (GaussianBaseline, MultinomialBaseline, WorkingModelSpec,
                     full_propensity, itemwise_odds_ratio, itemwise_propensity,
                     odds_function, propensity_ratio, sequential_odds_ratio,
                     tilted_conditional)
from .oracle import (DiscreteJoint, IdentificationError, ObservedLaw,
                     PositivityError, construct_self_censoring_joint,
                     reconstruct_joint, refute_self_censoring,
                     sequential_or_from_observed, solve_odds_function,
                     test_self_censoring_restriction, verify_self_censoring)
from .patterns import (Pattern, PatternSet, ValidationReport,
                       enumerate_patterns, validate_positivity)
from .simharness import (MonteCarloReport, ScenarioConfig,
                         analytic_pattern_marginal, coverage_table,
                         default_truth, run_scenario, sample_dataset,
                         scenario_spec, true_functional_value)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
