"""Masking, losses, task scheduling, optimisation and the training loops."""

from spatialvl.training.loop import TrainResult, evaluate, finetune, pretrain
from spatialvl.training.masking import MaskPlan, make_mask_plan
from spatialvl.training.schedule import ARMS, FULL_ARM, AdamW, TaskSchedule, arm_ratios, learning_rate

__all__ = [
    "ARMS",
    "FULL_ARM",
    "AdamW",
    "MaskPlan",
    "TaskSchedule",
    "TrainResult",
    "arm_ratios",
    "evaluate",
    "finetune",
    "learning_rate",
    "make_mask_plan",
    "pretrain",
]
