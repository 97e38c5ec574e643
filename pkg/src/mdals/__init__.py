"""Mixed-dimension matrix factorization trained with alternating least squares."""

from .data import (
    DataError,
    DimensionScheme,
    RatingDataset,
    RatingLog,
    RawRating,
    assign_dimensions,
    binarize,
    filter_min_support,
    fixed_scheme,
    load_dataset,
    load_ratings,
    popularity_stats,
    prepare,
    save_dataset,
    temporal_split,
)
from .evaluation import evaluate_model, rmse, roc_auc
from .kernels import BACKEND
from .model import (
    ModelParams,
    count_parameters,
    init_params,
    load_checkpoint,
    predict,
    project_all,
    save_checkpoint,
)
from .solvers import TrainConfig, TrainingError, compute_loss, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DataError",
    "DimensionScheme",
    "ModelParams",
    "RatingDataset",
    "RatingLog",
    "RawRating",
    "TrainConfig",
    "TrainingError",
    "assign_dimensions",
    "binarize",
    "compute_loss",
    "count_parameters",
    "evaluate_model",
    "filter_min_support",
    "fixed_scheme",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "load_ratings",
    "popularity_stats",
    "predict",
    "prepare",
    "project_all",
    "rmse",
    "roc_auc",
    "save_checkpoint",
    "save_dataset",
    "temporal_split",
    "train",
]
