"""TeliNet: a small NumPy CNN engine for COVID/non-COVID CT-slice triage."""

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import ConfusionCounts, EvalReport, compute_report, majority_vote
from .models import Model, ModelSpec, build_telinet, build_vgg16, count_trainable_params
from .optim import LrSchedule, RMSprop, bce_loss
from .pipeline import TrainConfig, evaluate, predict_series, train

__all__ = [
    "ConfusionCounts", "EvalReport", "LrSchedule", "Model", "ModelSpec", "RMSprop", "TrainConfig",
    "bce_loss", "build_telinet", "build_vgg16", "compute_report", "count_trainable_params",
    "evaluate", "load_checkpoint", "majority_vote", "predict_series", "save_checkpoint", "train",
]
