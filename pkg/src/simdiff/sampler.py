"""Deterministic DDIM sampling with optional gradient guidance.

Fields are batched as ``(B, C, H, W)``. A denoiser is anything with a
``predict_noise(x_t, t, context, cond)`` method; a guidance model is
anything with ``guidance(x_t, eps_hat, t, sched)`` returning the gradient
term that is added inside the update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion.schedule import NoiseSchedule, tweedie_x0hat
from .errors import RejectedInputError
from .fields import avg_pool, avg_pool_adjoint, mask_project, warp, warp_adjoint

GUIDANCE_WEIGHTS = ("stable", "eq8", "score")


def ddim_coefficient(alpha: float, alpha_bar: float) -> float:
    """Weight on the predicted noise in the deterministic update."""
    return (1.0 - alpha) / (np.sqrt(1.0 - alpha_bar) + np.sqrt(alpha - alpha_bar))


def guidance_weight(form: str, alpha: float, alpha_bar: float) -> float:
    """Scale on the guidance gradient.

    ``stable`` drops the ``1 - alpha`` factor, ``eq8`` keeps it, and
    ``score`` folds the gradient into the noise estimate as
    ``eps_hat - sqrt(1 - alpha_bar) * g``, which is the exact conditional
    score substitution when ``g`` is the true likelihood score at ``x_t``.
    """
    if form == "stable":
        return 1.0
    if form == "eq8":
        return 1.0 - alpha
    if form == "score":
        return ddim_coefficient(alpha, alpha_bar) * np.sqrt(1.0 - alpha_bar)
    raise RejectedInputError(f"unknown guidance weight form {form!r}; expected one of {GUIDANCE_WEIGHTS}")


def ddim_update(x_t, eps_hat, alpha: float, alpha_bar: float, g=None, weight: float = 1.0):
    """``(x_t - coeff * eps_hat + weight * g) / sqrt(alpha)``."""
    out = np.asarray(x_t) - ddim_coefficient(alpha, alpha_bar) * np.asarray(eps_hat)
    if g is not None:
        out = out + weight * g
    return out / np.sqrt(alpha)


def ddim_step(x_t, eps_hat, t: int, sched: NoiseSchedule):
    t = sched.check_step(t)
    return ddim_update(x_t, eps_hat, sched.alpha[t], sched.alpha_bar[t])


# ------------------------------------------------------------------ guidance


class EnergyGuidance:
    """Guidance from a differentiable ``log p(c2 | x0)`` evaluated at the Tweedie estimate."""

    def log_prob(self, x0) -> np.ndarray:
        raise NotImplementedError

    def grad_log_prob(self, x0) -> np.ndarray:
        raise NotImplementedError

    def guidance(self, x_t, eps_hat, t, sched: NoiseSchedule) -> np.ndarray:
        x0 = tweedie_x0hat(x_t, eps_hat, t, sched)
        return self.grad_log_prob(x0) / np.sqrt(sched.alpha_bar[t])


def _batch_sum(a):
    return a.reshape(a.shape[0], -1).sum(axis=1) if a.ndim > 2 else np.sum(a)


@dataclass
class PatchPoolGuidance(EnergyGuidance):
    """``log p = -gamma * || pool(c2, k2) - pool(x0, k4) ||^2`` over each sample."""

    c2: np.ndarray
    k2: int = 1
    k4: int = 2
    gamma: float = 0.01

    def __post_init__(self):
        if self.gamma <= 0:
            raise RejectedInputError("gamma must be positive")
        self.c2 = np.asarray(self.c2, dtype=np.float64)
        self._target = avg_pool(self.c2, self.k2)

    def _residual(self, x0):
        pooled = avg_pool(x0, self.k4)
        if pooled.shape[-2:] != self._target.shape[-2:]:
            raise RejectedInputError(
                f"pooled state {pooled.shape[-2:]} does not match pooled observation {self._target.shape[-2:]}")
        return self._target - pooled

    def log_prob(self, x0):
        return -self.gamma * _batch_sum(self._residual(x0) ** 2)

    def grad_log_prob(self, x0):
        return 2 * self.gamma * avg_pool_adjoint(self._residual(x0), self.k4)


@dataclass
class FlowWarpGuidance(EnergyGuidance):
    """Flow-consistency energy over a stack of frames held as channels.

    ``velocity`` has shape ``(..., K, 2, H, W)`` where flow ``k`` carries
    channel ``k`` to channel ``k + 1``; ``masks`` is ``(..., K, H, W)`` and
    selects where the residual of that transition counts. With
    ``x_prev`` given (``(..., H, W)``), one extra leading transition from
    ``x_prev`` into channel 0 is included, using ``prev_velocity`` and
    ``prev_mask``. ``log p = -gamma/2 * sum_k || P_k(warp(f_{k-1}, v_k) - f_k) ||^2``.
    """

    velocity: np.ndarray
    masks: np.ndarray
    ds: float = 1.0
    gamma: float = 0.05
    x_prev: np.ndarray | None = None
    prev_velocity: np.ndarray | None = None
    prev_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise RejectedInputError("gamma must be positive")
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.velocity.shape[-3] != 2 or self.velocity.shape[:-3] != self.masks.shape[:-2] \
                or self.velocity.shape[-2:] != self.masks.shape[-2:]:
            raise RejectedInputError(
                f"flow stack {self.velocity.shape} and mask stack {self.masks.shape} are inconsistent")
        if self.x_prev is not None and (self.prev_velocity is None or self.prev_mask is None):
            raise RejectedInputError("x_prev needs prev_velocity and prev_mask")

    def _check(self, x0):
        k = self.velocity.shape[-4]
        if x0.shape[-3] != k + 1 or x0.shape[-2:] != self.masks.shape[-2:]:
            raise RejectedInputError(f"state {x0.shape} needs {k + 1} frames matching flows {self.velocity.shape}")

    def _residuals(self, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        self._check(x0)
        if self.velocity.shape[-4] == 0:
            res = np.zeros(x0.shape[:-3] + (0,) + x0.shape[-2:])
        else:
            res = mask_project(warp(x0[..., :-1, :, :], self.velocity, self.ds) - x0[..., 1:, :, :], self.masks)
        lead = None
        if self.x_prev is not None:
            lead = mask_project(warp(self.x_prev, self.prev_velocity, self.ds) - x0[..., 0, :, :], self.prev_mask)
        return res, lead

    def log_prob(self, x0):
        res, lead = self._residuals(x0)
        total = np.sum(res ** 2, axis=(-3, -2, -1))
        if lead is not None:
            total = total + np.sum(lead ** 2, axis=(-2, -1))
        return -0.5 * self.gamma * total

    def grad_log_prob(self, x0):
        res, lead = self._residuals(x0)
        grad = np.zeros(np.broadcast_shapes(np.shape(x0), res.shape[:-3] + np.shape(x0)[-3:]))
        if res.shape[-3]:
            grad[..., 1:, :, :] += self.gamma * res
            grad[..., :-1, :, :] -= self.gamma * warp_adjoint(res, self.velocity, self.ds)
        if lead is not None:
            grad[..., 0, :, :] += self.gamma * lead
        return grad


@dataclass
class GaussianConjugateGuidance(EnergyGuidance):
    """``c2 = x0 + noise`` with noise variance ``noise_var``."""

    c2: np.ndarray
    noise_var: float = 1.0

    def __post_init__(self):
        if self.noise_var <= 0:
            raise RejectedInputError("noise variance must be positive")

    def log_prob(self, x0):
        return -0.5 * _batch_sum((np.asarray(self.c2) - x0) ** 2) / self.noise_var

    def grad_log_prob(self, x0):
        return (np.asarray(self.c2) - np.asarray(x0)) / self.noise_var


@dataclass
class ZeroGuidance:
    def guidance(self, x_t, eps_hat, t, sched):
        return np.zeros_like(x_t)


def guidance_gradient(model, x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    return model.guidance(x_t, eps_hat, sched.check_step(t), sched)


def clip_per_sample(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norms = np.sqrt(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1))
    scale = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


# ------------------------------------------------------------------ sampling


def initial_noise(seed: int, batch: int, shape: tuple[int, ...], dtype=np.float64) -> np.ndarray:
    """Starting noise; chain ``i`` draws from its own generator seeded by ``(seed, i)``."""
    out = np.empty((batch,) + tuple(shape), dtype=dtype)
    for i in range(batch):
        out[i] = np.random.default_rng([seed, i]).standard_normal(shape)
    return out


@dataclass
class SampleRun:
    seed: int
    schedule_digest: str
    choice: int
    sample: np.ndarray
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.sample)):
            raise FloatingPointError("reverse trajectory produced non-finite values")


def sample_guided(denoiser, context, cond, model, sched: NoiseSchedule, seed: int, *, batch: int | None = None,
                  shape: tuple[int, ...] | None = None, weight: str = "stable", clip_norm: float | None = 10.0,
                  keep_trajectory: bool = False, x_T=None) -> SampleRun:
    """Reverse DDIM from seeded noise; ``model=None`` gives the unguided sampler."""
    if x_T is None:
        if batch is None:
            batch = len(context) if context is not None else len(cond)
        if shape is None:
            shape = (denoiser.arch.target_channels,) + np.shape(context)[-2:]
        x_T = initial_noise(seed, batch, shape)
    x = np.array(x_T, dtype=np.float64)
    if weight not in GUIDANCE_WEIGHTS:
        raise RejectedInputError(f"unknown guidance weight form {weight!r}; expected one of {GUIDANCE_WEIGHTS}")
    traj = [x.copy()] if keep_trajectory else None
    for t in range(sched.T, 0, -1):
        tt = np.full(len(x), t)
        eps_hat = np.asarray(denoiser.predict_noise(x, tt, context, cond), dtype=np.float64)
        g = None
        w = 1.0
        if model is not None:
            g = clip_per_sample(model.guidance(x, eps_hat, t, sched), clip_norm)
            w = guidance_weight(weight, sched.alpha[t], sched.alpha_bar[t])
        x = ddim_update(x, eps_hat, sched.alpha[t], sched.alpha_bar[t], g, w)
        if keep_trajectory:
            traj.append(x.copy())
    return SampleRun(seed, sched.digest(), 1 if model is None else 2, x, traj)


def sample(denoiser, context, cond, sched: NoiseSchedule, seed: int, **kw) -> SampleRun:
    return sample_guided(denoiser, context, cond, None, sched, seed, **kw)


def _repeat(arr, n):
    if arr is None:
        return None
    arr = np.asarray(arr)
    return np.repeat(arr, n, axis=0) if arr.shape[0] == 1 else arr


def sample_ensemble(n: int, denoiser, context, cond, sched: NoiseSchedule, seed: int, model=None, **kw):
    """``n`` chains for one record; returns ``(mean, std, samples)`` with the population std."""
    if n < 2:
        raise RejectedInputError("an ensemble needs at least two members")
    run = sample_guided(denoiser, _repeat(context, n), _repeat(cond, n), model, sched, seed, batch=n, **kw)
    samples = run.sample
    return samples.mean(axis=0), samples.std(axis=0), samples
