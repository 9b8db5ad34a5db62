"""Sparse group lasso multiclass logistic regression for functional predictors.

Groups are predictors (scalar vectors or B-spline coefficient curves); within
each group the sub-blocks are the per-class decision boundaries against a
reference class. The penalty can zero whole predictors and, separately,
single boundaries of a retained predictor.
"""

from .basis import BasisSystem, RawCurve, evaluate_basis, gram_matrix, smooth_many, smooth_observations
from .bootstrap import SelectionReport, bootstrap_run, rotate_reference
from .exceptions import (
    BilevelFDAError,
    ConvergenceError,
    DomainError,
    IllPosedSmoothingError,
    InputError,
    NumericalError,
    RankDeficiencyError,
)
from .model import (
    CoefficientSet,
    DesignMatrix,
    FunctionalDataset,
    PredictorGroup,
    build_design,
    log_likelihood,
    posterior_probs,
    predict_classes,
    score,
)
from .optimizer import PenaltyConfig, SolverControls, SolverReport, block_solve, fit, lambda_max
from .selection import ScoredFit, SelectionPath, TuningGrid, effective_df, grid_search, select_best

__all__ = [
    "BasisSystem", "RawCurve", "evaluate_basis", "gram_matrix", "smooth_many", "smooth_observations",
    "SelectionReport", "bootstrap_run", "rotate_reference",
    "BilevelFDAError", "ConvergenceError", "DomainError", "IllPosedSmoothingError", "InputError",
    "NumericalError", "RankDeficiencyError",
    "CoefficientSet", "DesignMatrix", "FunctionalDataset", "PredictorGroup", "build_design",
    "log_likelihood", "posterior_probs", "predict_classes", "score",
    "PenaltyConfig", "SolverControls", "SolverReport", "block_solve", "fit", "lambda_max",
    "ScoredFit", "SelectionPath", "TuningGrid", "effective_df", "grid_search", "select_best",
]
__version__ = "0.1.0"
