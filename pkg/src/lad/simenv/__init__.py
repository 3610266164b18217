"""Synthetic detection world, linear detector and training loop."""

from .model import ForwardOutput, ModelParams, backward, forward, init_params
from .train import NumericalAbort, TrainResult, evaluate_model, train
from .world import Scene, extract_features, generate_dataset, generate_scene, num_features

__all__ = [
    "ForwardOutput",
    "ModelParams",
    "NumericalAbort",
    "Scene",
    "TrainResult",
    "backward",
    "evaluate_model",
    "extract_features",
    "forward",
    "generate_dataset",
    "generate_scene",
    "init_params",
    "num_features",
    "train",
]
