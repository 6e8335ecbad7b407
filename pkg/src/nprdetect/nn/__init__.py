"""From-scratch numpy CNN: layers, detector model, BCE, Adam and training."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import NonFiniteError, conv2d_backward, conv2d_forward
from .loss import bce_loss, sigmoid
from .model import ARCHITECTURE, DetectorModel, backward, forward
from .optim import AdamState, adam_step
from .train import ArrayDataset, TrainConfig, TrainingDiverged, train, write_history

__all__ = [
    "ARCHITECTURE",
    "AdamState",
    "ArrayDataset",
    "CheckpointError",
    "DetectorModel",
    "NonFiniteError",
    "TrainConfig",
    "TrainingDiverged",
    "adam_step",
    "backward",
    "bce_loss",
    "conv2d_backward",
    "conv2d_forward",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "sigmoid",
    "train",
    "write_history",
]
