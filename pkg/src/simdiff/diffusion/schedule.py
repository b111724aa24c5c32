"""Noise schedule tables and the closed-form forward / Tweedie maps."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import NumericalGuardError, RejectedInputError


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by diffusion step ``t = 0..T``.

    Index 0 holds the clean-data convention ``beta = 0, alpha = alpha_bar = 1``
    so ``schedule.alpha_bar[t]`` reads exactly like the math for ``t >= 1``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise RejectedInputError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise RejectedInputError("every beta must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    def check_step(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise RejectedInputError(f"diffusion step {t} outside [{lo}, {self.T}]")
        return int(t)

    def digest(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]

    def spec(self) -> dict:
        return {"T": self.T, "digest": self.digest()}


def make_linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.07) -> NoiseSchedule:
    if T < 2:
        raise RejectedInputError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise RejectedInputError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _per_sample(table: np.ndarray, t, ndim: int):
    """Look up ``table[t]`` and shape it to broadcast against a batch of fields."""
    vals = table[np.asarray(t)]
    if np.ndim(vals) == 0:
        return float(vals)
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be a per-sample array."""
    ts = np.atleast_1d(np.asarray(t))
    if ts.min() < 0 or ts.max() > sched.T:
        raise RejectedInputError(f"diffusion step outside [0, {sched.T}]")
    x0 = np.asarray(x0)
    ab = _per_sample(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def tweedie_x0hat(x_t, eps_hat, t, sched: NoiseSchedule):
    """Point estimate of the clean sample from a noisy one and its predicted noise."""
    ts = np.atleast_1d(np.asarray(t))
    if ts.min() < 0 or ts.max() > sched.T:
        raise RejectedInputError(f"diffusion step outside [0, {sched.T}]")
    if np.min(sched.alpha_bar[ts]) < 1e-8:
        raise NumericalGuardError("alpha_bar below 1e-8; schedule too long for Tweedie inversion")
    x_t = np.asarray(x_t)
    ab = _per_sample(sched.alpha_bar, t, x_t.ndim)
    return (x_t - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)
