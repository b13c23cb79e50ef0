"""Minimal numpy neural-network kernel: layers, U-Net model, Adam, checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import KeypointNet, ModelSpec, init_params, param_shapes
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "Checkpoint",
    "KeypointNet",
    "ModelSpec",
    "adam_step",
    "init_params",
    "load_checkpoint",
    "param_shapes",
    "save_checkpoint",
]
