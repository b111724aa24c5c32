"""Fit heat-kernel parameters to observed melt-pool frames.

The loss is the frame-averaged squared residual ``(1/N) sum_i ||u_i - u(s_i; phi)||^2``.
Adam runs on log-parameters so positivity is automatic. A step that raises
the loss is rejected, the learning rate halved and the moments restarted, so
the accepted loss sequence is monotone; accepted steps let the rate creep
back toward its initial value.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..diffusion.optim import AdamState, adam_update
from ..errors import DivergedCalibrationError, RejectedInputError
from .heat import HeatParams, LaserPath, ThermalGrid, meltpool_with_grad


@dataclass(frozen=True)
class CalibrationConfig:
    lr: float = 0.05
    max_steps: int = 3000
    lr_growth: float = 1.05
    min_lr: float = 1e-6
    grad_tol: float = 1e-10
    dq: float = 0.05
    kernel: str = "heat"


@dataclass
class CalibrationResult:
    params: HeatParams
    loss: float
    losses: list = field(default_factory=list)
    steps: int = 0
    rejected: int = 0


def calibration_loss(observations, path: LaserPath, phi: HeatParams, grid: ThermalGrid,
                     dq: float = 0.05, kernel: str = "heat"):
    """Loss and its gradient in ``log phi`` (order rho, kappa_x, kappa_y, amplitude)."""
    loss = 0.0
    grad = np.zeros(4)
    for s, frame in observations:
        u, du = meltpool_with_grad(path, s, phi, grid, dq, kernel)
        r = u - frame
        loss += float(np.sum(r * r))
        grad += 2.0 * np.tensordot(du, r, axes=([1, 2], [0, 1]))
    n = len(observations)
    return loss / n, grad / n


def _check_observations(observations, grid: ThermalGrid):
    obs = [(float(s), np.asarray(f, dtype=np.float64)) for s, f in observations]
    if not obs:
        raise RejectedInputError("calibration needs at least one observation frame")
    for s, f in obs:
        if f.shape != (grid.ny, grid.nx):
            raise RejectedInputError(f"frame at s={s} has shape {f.shape}, grid is {(grid.ny, grid.nx)}")
    return obs


def calibrate(observations, path: LaserPath, init: HeatParams, grid: ThermalGrid = ThermalGrid(),
              cfg: CalibrationConfig = CalibrationConfig()) -> CalibrationResult:
    """Adam on log-parameters with rejection of loss-increasing steps.

    ``observations`` is a sequence of ``(time, frame)`` pairs.
    """
    obs = _check_observations(observations, grid)
    if init.rho <= 0:
        raise RejectedInputError("initial rho must be positive for log-parameter descent")
    theta = np.log(init.as_array())
    loss, grad = calibration_loss(obs, path, init, grid, cfg.dq, cfg.kernel)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergedCalibrationError(f"non-finite loss at the initial parameters: {loss}")
    adam = AdamState.zeros_like(theta, lr=cfg.lr)
    result = CalibrationResult(init, loss, [loss])
    for _ in range(cfg.max_steps):
        if loss == 0.0 or np.max(np.abs(grad)) < cfg.grad_tol or adam.lr < cfg.min_lr:
            break
        trial_adam = replace(adam, m=adam.m.copy(), v=adam.v.copy())
        trial = theta.copy()
        adam_update(trial_adam, trial, grad)
        phi = HeatParams.from_array(np.exp(trial))
        new_loss, new_grad = calibration_loss(obs, path, phi, grid, cfg.dq, cfg.kernel)
        if not np.isfinite(new_loss) or not np.all(np.isfinite(new_grad)):
            raise DivergedCalibrationError(f"non-finite loss after step {result.steps}: {new_loss}")
        if new_loss > loss:
            adam = AdamState.zeros_like(theta, lr=0.5 * adam.lr)
            result.rejected += 1
            continue
        theta, loss, grad, adam = trial, new_loss, new_grad, trial_adam
        adam.lr = min(cfg.lr, adam.lr * cfg.lr_growth)
        result.steps += 1
        result.losses.append(loss)
    result.params = HeatParams.from_array(np.exp(theta))
    result.loss = loss
    return result


__all__ = ["CalibrationConfig", "CalibrationResult", "calibrate", "calibration_loss"]
