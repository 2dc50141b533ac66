"""Behavior-weighted graph attention network, gradients and training."""

from .network import (
    aggregate,
    attention_coefficients,
    backward,
    build_blocks,
    cross_entropy,
    elu,
    forward,
    leaky_relu,
    log_softmax,
    predict,
    softmax,
)
from .optim import AdamState, adam_step
from .params import (
    LayerParams,
    ModelParams,
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainResult, train

__all__ = [
    "AdamState",
    "LayerParams",
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "aggregate",
    "attention_coefficients",
    "backward",
    "build_blocks",
    "cross_entropy",
    "elu",
    "forward",
    "init_params",
    "leaky_relu",
    "load_checkpoint",
    "log_softmax",
    "predict",
    "save_checkpoint",
    "softmax",
    "train",
]
