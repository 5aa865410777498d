from .schedule import NoiseSchedule, build_schedule, snr, training_weight
from .conditioning import ConditioningMatrix, class_condition, mix_conditions
from .codec import IdentityCodec, LatentCodec
from .denoiser import ConditionedDenoiser, DenoiserConfig
from .process import (
    forward_marginal,
    forward_step,
    reverse_step,
    sample,
    training_loss,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "snr",
    "training_weight",
    "ConditioningMatrix",
    "class_condition",
    "mix_conditions",
    "LatentCodec",
    "IdentityCodec",
    "ConditionedDenoiser",
    "DenoiserConfig",
    "forward_marginal",
    "forward_step",
    "reverse_step",
    "sample",
    "training_loss",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainingDiverged",
    "train",
]
