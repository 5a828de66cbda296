"""Gaussian-descriptor classification with OOD rejection for tabular data."""

from .head import (
    GaussianDescriptorSet,
    LossBreakdown,
    OOD_LABEL,
    Prediction,
    class_distances,
    class_scores,
    net_loss,
    predict,
)
from .checkpoint import TrainedModel
from .data import TabularDataset, apply_mdsr, load_csv, make_blobs, stratified_folds
from .metrics import EvalReport, auroc, aupr, evaluate, tnr_at_tpr
from .optim import TrainingDivergedError
from .trainer import TrainConfig, TrainState, bcd_step, fit, kfold_fit_eval

__version__ = "0.1.0"

__all__ = [
    "GaussianDescriptorSet", "LossBreakdown", "OOD_LABEL", "Prediction",
    "class_distances", "class_scores", "net_loss", "predict",
    "TrainedModel", "TabularDataset", "apply_mdsr", "load_csv", "make_blobs",
    "stratified_folds", "EvalReport", "auroc", "aupr", "evaluate", "tnr_at_tpr",
    "TrainingDivergedError", "TrainConfig", "TrainState", "bcd_step", "fit",
    "kfold_fit_eval", "__version__",
]
