"""Single-stream transformer, prediction heads and checkpoints."""

from spatialvl.model.batch import Batch, SequenceInput, collate
from spatialvl.model.checkpoint import load_checkpoint, save_checkpoint
from spatialvl.model.config import ModelConfig, check_params, init_params, param_shapes
from spatialvl.model.transformer import ForwardTrace, backward, embed, forward, zero_grads

__all__ = [
    "Batch",
    "ForwardTrace",
    "ModelConfig",
    "SequenceInput",
    "backward",
    "check_params",
    "collate",
    "embed",
    "forward",
    "init_params",
    "load_checkpoint",
    "param_shapes",
    "save_checkpoint",
    "zero_grads",
]
