from .layers import (
    BN_EPS,
    BN_MOMENTUM,
    LEAKY_MAX_LAMBDA,
    TN_EPS,
    BatchNorm2d,
    Conv2d,
    FullyConnected,
    Layer,
    LeakyMaxBlock,
    MaxPool2x2,
    NonFiniteError,
    ReLU,
    ReLUTensorNorm,
    Sequential,
    ShapeError,
)
from .train import MomentumTrainer, centralize_gradient, centralize_weights, sgd_step, sgd_step_model
from .weights_io import WeightFileError, load_weights, save_weights

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "LEAKY_MAX_LAMBDA",
    "TN_EPS",
    "BatchNorm2d",
    "Conv2d",
    "FullyConnected",
    "Layer",
    "LeakyMaxBlock",
    "MaxPool2x2",
    "MomentumTrainer",
    "NonFiniteError",
    "ReLU",
    "ReLUTensorNorm",
    "Sequential",
    "ShapeError",
    "WeightFileError",
    "centralize_gradient",
    "centralize_weights",
    "load_weights",
    "save_weights",
    "sgd_step",
    "sgd_step_model",
]
