"""Minimal reverse-mode differentiation engine and layer library."""
from .checkpoint import assign_params, load_checkpoint, save_checkpoint
from .layers import (
    DETERMINISTIC,
    Conv2D,
    Dense,
    Flatten,
    L2Normalize,
    Layer,
    MaxPool2D,
    Pass,
    ReLU,
    Sequential,
    Sigmoid,
    Softmax,
    layer_from_spec,
)
from .losses import bce_loss, cce_loss, combined_loss, triplet_loss
from .optim import Adam, AdamState
from .tensor import Tensor, l2_normalize, no_grad

__all__ = [
    "Adam", "AdamState", "Conv2D", "DETERMINISTIC", "Dense", "Flatten", "L2Normalize", "Layer",
    "MaxPool2D", "Pass", "ReLU", "Sequential", "Sigmoid", "Softmax", "Tensor", "assign_params",
    "bce_loss", "cce_loss", "combined_loss", "l2_normalize", "layer_from_spec", "load_checkpoint",
    "no_grad", "save_checkpoint", "triplet_loss",
]
