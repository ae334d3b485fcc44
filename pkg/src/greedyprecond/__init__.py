"""Greedy learned preconditioners for gradient descent."""

from .exceptions import (
    CapacityError,
    GreedyPrecondError,
    InvalidInputError,
    NumericalFailure,
    ParseError,
    RankDeficientError,
)
from .objectives import GaussianBlur, HuberTV, LeastSquares, Objective
from .preconditioners import Conv, Diagonal, FullMatrix, Scalar, from_tag
from .trainer import PreconditionerSchedule, TrainerConfig, TrainingTrace, train
from .deploy import (
    DeployPolicy,
    RunTrace,
    backtracking_gd,
    bfgs,
    exact_line_search_ls,
    fista,
    gd_fixed,
    load_schedule,
    reference_optimum,
    run_schedule,
    save_schedule,
)

__version__ = "0.1.0"
