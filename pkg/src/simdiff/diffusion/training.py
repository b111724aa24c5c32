"""Conditional noise-prediction training loop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RejectedInputError
from .network import Architecture, Denoiser
from .optim import AdamState, adam_update
from .schedule import NoiseSchedule, forward_diffuse


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    init_seed: int | None = None

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


@dataclass
class TrainingArrays:
    """Normalized training tensors, one row per record, each ``(N, channels, H, W)``."""

    target: np.ndarray
    context: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        if len(self.target) == 0:
            raise RejectedInputError("training set is empty")
        n, _, h, w = self.target.shape
        for name in ("context", "cond"):
            arr = getattr(self, name)
            if arr.shape[0] != n or arr.shape[2:] != (h, w):
                raise RejectedInputError(f"{name} shape {arr.shape} does not align with target {self.target.shape}")

    def architecture(self, **kw) -> Architecture:
        return Architecture(target_channels=self.target.shape[1], context_channels=self.context.shape[1],
                            cond_channels=self.cond.shape[1], **kw)


@dataclass
class TrainResult:
    denoiser: Denoiser
    adam: AdamState
    losses: list[float]

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        arr = np.asarray(self.losses)
        return [float(arr[i:i + steps_per_epoch].mean()) for i in range(0, len(arr), steps_per_epoch)]


def train(data: TrainingArrays, sched: NoiseSchedule, cfg: TrainConfig, dtype=np.float32,
          denoiser: Denoiser | None = None, adam: AdamState | None = None) -> TrainResult:
    """Minibatch Adam on the noise-prediction loss.

    Each step draws its own generator from ``(seed, step)`` so a run resumed
    from a checkpoint replays exactly the batches a straight run would see.
    """
    if denoiser is None:
        init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
        denoiser = Denoiser.initialize(data.architecture(), init_seed, dtype=dtype)
    else:
        denoiser = denoiser.astype(dtype)
    if adam is None:
        adam = AdamState.zeros_like(denoiser.params, lr=cfg.lr)
    target = data.target.astype(dtype)
    context = data.context.astype(dtype)
    cond = data.cond.astype(dtype)
    n = len(target)
    losses = []
    start = adam.step
    for step in range(start, start + cfg.total_steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.integers(0, n, cfg.batch_size)
        t = rng.integers(1, sched.T + 1, cfg.batch_size)
        eps = rng.standard_normal(target[idx].shape).astype(dtype)
        x_t = forward_diffuse(target[idx], t, eps, sched).astype(dtype)
        loss, grad = denoiser.loss_and_grad(x_t, t, context[idx], cond[idx], eps)
        if not np.isfinite(loss):
            raise RejectedInputError(f"training loss became non-finite at step {step}")
        adam_update(adam, denoiser.params, grad / cfg.batch_size)
        losses.append(loss / cfg.batch_size)
    return TrainResult(denoiser, adam, losses)


def write_loss_csv(path, losses, first_step: int = 0) -> None:
    lines = ["step,loss"] + [f"{first_step + i},{v:.9g}" for i, v in enumerate(losses)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
