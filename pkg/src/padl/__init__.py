"""Annotation distribution learning with per-annotator preference heads, in numpy."""
from .errors import PadlError
from .model import ModelConfig, build_model, model_forward
from .trainer import TrainConfig, train, predict, evaluate_model, poly_lr, Adam

__all__ = [
    "PadlError",
    "ModelConfig",
    "build_model",
    "model_forward",
    "TrainConfig",
    "train",
    "predict",
    "evaluate_model",
    "poly_lr",
    "Adam",
]
