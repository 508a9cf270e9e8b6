"""Minimal numpy neural toolkit hosting the TDNN."""

from .io import load_model, save_model
from .optim import AdamW
from .tdnn import TdnnConfig, TdnnModel, average_posterior, count_parameters, forward
from .train import TrainConfig, evaluate, predict_posteriors, train, train_epoch

__all__ = [
    "AdamW", "TdnnConfig", "TdnnModel", "TrainConfig", "average_posterior", "count_parameters",
    "evaluate", "forward", "load_model", "predict_posteriors", "save_model", "train", "train_epoch",
]
