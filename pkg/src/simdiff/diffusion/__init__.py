"""Noise schedules, the compact denoiser, Adam and the training loop."""
from .checkpoint import load_checkpoint, save_checkpoint
from .network import Architecture, Denoiser, time_embedding
from .optim import AdamState, adam_update
from .schedule import NoiseSchedule, forward_diffuse, make_linear_schedule, tweedie_x0hat
from .training import TrainConfig, TrainingArrays, TrainResult, train, write_loss_csv

__all__ = [
    "AdamState", "Architecture", "Denoiser", "NoiseSchedule", "TrainConfig", "TrainResult",
    "TrainingArrays", "adam_update", "forward_diffuse", "load_checkpoint", "make_linear_schedule",
    "save_checkpoint", "time_embedding", "train", "tweedie_x0hat", "write_loss_csv",
]
