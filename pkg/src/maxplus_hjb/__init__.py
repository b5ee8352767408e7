"""Max-plus probabilistic scheme for switching-control HJB equations."""

from .model import (
    ControlMode,
    ProblemSpec,
    SplitConditionError,
    correlation_mode,
    uncertain_correlation_problem,
    validate_split,
)
from .oracle_bench import BenchmarkCase, EvaluationGrid, error_norms, oracle_constant_mode, run_benchmark
from .quadform import (
    MaxPlusFunction,
    PayoffApproximationError,
    QuadraticForm,
    RidgePayoff,
    approximate_payoff,
    compose_affine,
    evaluate,
    prune_duplicates,
    sup_evaluate,
)
from .regression import fit_quadratic, project_concave
from .sampling import PathTable, SamplePlan, build_pairs, simulate_paths
from .scheme import apply_operator, build_selection, estimate_D, weight_P
from .solver import SolveResult, backward_solve, evaluate_value

__all__ = [
    "BenchmarkCase",
    "ControlMode",
    "EvaluationGrid",
    "MaxPlusFunction",
    "PathTable",
    "PayoffApproximationError",
    "ProblemSpec",
    "QuadraticForm",
    "RidgePayoff",
    "SamplePlan",
    "SolveResult",
    "SplitConditionError",
    "apply_operator",
    "approximate_payoff",
    "backward_solve",
    "build_pairs",
    "build_selection",
    "compose_affine",
    "correlation_mode",
    "error_norms",
    "estimate_D",
    "evaluate",
    "evaluate_value",
    "fit_quadratic",
    "oracle_constant_mode",
    "project_concave",
    "prune_duplicates",
    "run_benchmark",
    "simulate_paths",
    "sup_evaluate",
    "uncertain_correlation_problem",
    "validate_split",
    "weight_P",
]
