"""Closed-form melt-pool temperature from a moving point heat source.

The source is a laser spot following a piecewise-linear path. Temperature at
time ``s`` is the time integral of the Green's function against the source
power, evaluated with a fixed-step trapezoid rule that starts half a step
before ``s`` (the kernel is singular as the source time approaches ``s``).

Two kernels are provided. ``printed`` is the amplitude-times-exponentials
form with a constant amplitude. ``heat`` additionally carries the
``1 / (4 pi tau sqrt(kx ky))`` normalization of the anisotropic 2-D heat
kernel, which is what makes the integral solve the diffusion equation with
linear loss; it is the default for fields and calibration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RejectedInputError

KERNELS = ("heat", "printed")


@dataclass(frozen=True)
class HeatParams:
    rho: float
    kappa_x: float
    kappa_y: float
    amplitude: float

    def __post_init__(self):
        if self.rho < 0 or self.kappa_x <= 0 or self.kappa_y <= 0 or self.amplitude <= 0:
            raise RejectedInputError(f"invalid heat parameters {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.kappa_x, self.kappa_y, self.amplitude])

    @classmethod
    def from_array(cls, a) -> "HeatParams":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class LaserPath:
    """Waypoints ``(time, x, y, power)``; position and power interpolate linearly between them."""

    times: tuple[float, ...]
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    powers: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if not (len(self.times) == len(self.xs) == len(self.ys) == len(self.powers)) or len(t) < 1:
            raise RejectedInputError("waypoint lists must be non-empty and equal length")
        if np.any(np.diff(t) <= 0):
            raise RejectedInputError("waypoint times must be strictly increasing")
        if np.any(np.asarray(self.powers) < 0):
            raise RejectedInputError("laser power must be non-negative")

    @classmethod
    def stationary(cls, x: float, y: float, power: float, t0: float, t1: float) -> "LaserPath":
        return cls((t0, t1), (x, x), (y, y), (power, power))

    @property
    def start(self) -> float:
        return self.times[0]

    @property
    def end(self) -> float:
        return self.times[-1]

    def at(self, s):
        s = np.asarray(s, dtype=float)
        return (np.interp(s, self.times, self.xs), np.interp(s, self.times, self.ys),
                np.interp(s, self.times, self.powers))

    def scaled(self, factor: float) -> "LaserPath":
        return LaserPath(self.times, self.xs, self.ys, tuple(factor * p for p in self.powers))

    def to_dict(self) -> dict:
        return {"times": list(self.times), "xs": list(self.xs), "ys": list(self.ys), "powers": list(self.powers)}


@dataclass(frozen=True)
class ThermalGrid:
    """``nx x ny`` cells with spacing ``h``; cell ``(i, j)`` sits at ``x = j h``, ``y = i h``."""

    nx: int = 32
    ny: int = 32
    spacing: float = 1.0

    def coords(self):
        return np.arange(self.nx) * self.spacing, np.arange(self.ny) * self.spacing


def greens_function(r, s: float, r_src, s_src: float, phi: HeatParams, kernel: str = "printed") -> float:
    """Kernel value at point ``r`` and time ``s`` for a unit impulse at ``r_src``, ``s_src``."""
    tau = s - s_src
    if tau <= 0:
        raise RejectedInputError("the Green's function needs s > s'")
    dx = float(r[0]) - float(r_src[0])
    dy = float(r[1]) - float(r_src[1])
    quad = dx * dx / phi.kappa_x + dy * dy / phi.kappa_y
    value = phi.amplitude * np.exp(-phi.rho * tau) * np.exp(-quad / (4 * tau))
    if kernel == "heat":
        value /= 4 * np.pi * tau * np.sqrt(phi.kappa_x * phi.kappa_y)
    elif kernel != "printed":
        raise RejectedInputError(f"unknown kernel {kernel!r}")
    return float(value)


def quadrature_nodes(path: LaserPath, s: float, dq: float):
    """Trapezoid nodes and weights over source times ``[start, s - dq/2]``.

    Nodes are spaced ``dq`` from the path start with one shorter final
    interval ending half a step before ``s``, so the result varies smoothly
    with ``s`` while the singular endpoint stays excluded.
    """
    if dq <= 0:
        raise RejectedInputError("quadrature step must be positive")
    if not path.start < s <= path.end + 1e-12:
        raise RejectedInputError(f"time {s} outside the laser path span [{path.start}, {path.end}]")
    upper = s - 0.5 * dq
    if upper <= path.start:
        return np.zeros(0), np.zeros(0)
    times = np.arange(path.start, upper, dq)
    if upper - times[-1] > 1e-12 * dq:
        times = np.append(times, upper)
    else:
        times[-1] = upper
    if len(times) == 1:
        return times, np.array([upper - path.start])
    gaps = np.diff(times)
    weights = np.zeros(len(times))
    weights[:-1] += 0.5 * gaps
    weights[1:] += 0.5 * gaps
    return times, weights


def _separable_terms(path, s, phi, grid, dq, kernel):
    """Per-node amplitude and the x / y exponential factors of the kernel."""
    times, weights = quadrature_nodes(path, s, dq)
    px, py, power = path.at(times)
    tau = s - times
    xs, ys = grid.coords()
    dx2 = (xs[None, :] - px[:, None]) ** 2
    dy2 = (ys[None, :] - py[:, None]) ** 2
    ex = np.exp(-dx2 / (4 * phi.kappa_x * tau[:, None]))
    ey = np.exp(-dy2 / (4 * phi.kappa_y * tau[:, None]))
    amp = weights * power * phi.amplitude * np.exp(-phi.rho * tau)
    if kernel == "heat":
        amp = amp / (4 * np.pi * tau * np.sqrt(phi.kappa_x * phi.kappa_y))
    elif kernel != "printed":
        raise RejectedInputError(f"unknown kernel {kernel!r}")
    return tau, amp, ex, ey, dx2, dy2


def meltpool_field(path: LaserPath, s: float, phi: HeatParams, grid: ThermalGrid = ThermalGrid(),
                   dq: float = 0.05, kernel: str = "heat") -> np.ndarray:
    """Temperature on the grid at time ``s``; ``(ny, nx)``."""
    _, amp, ex, ey, _, _ = _separable_terms(path, s, phi, grid, dq, kernel)
    return (ey * amp[:, None]).T @ ex


def meltpool_with_grad(path: LaserPath, s: float, phi: HeatParams, grid: ThermalGrid = ThermalGrid(),
                       dq: float = 0.05, kernel: str = "heat"):
    """Field and its derivatives in ``log rho, log kappa_x, log kappa_y, log amplitude``; ``(4, ny, nx)``.

    Each derivative is the quadrature sum of the kernel times its log-derivative.
    """
    tau, amp, ex, ey, dx2, dy2 = _separable_terms(path, s, phi, grid, dq, kernel)
    u = (ey * amp[:, None]).T @ ex
    norm = 0.5 if kernel == "heat" else 0.0
    # d log G / d log kappa_x = dx^2 / (4 kappa_x tau) - 1/2 (heat kernel normalization)
    dkx = (ey * amp[:, None]).T @ (ex * (dx2 / (4 * phi.kappa_x * tau[:, None]) - norm))
    dky = (ey * amp[:, None] * (dy2 / (4 * phi.kappa_y * tau[:, None]) - norm)).T @ ex
    drho = (ey * (amp * -phi.rho * tau)[:, None]).T @ ex
    return u, np.stack([drho, dkx, dky, u])


def pde_residual(path: LaserPath, s: float, phi: HeatParams, grid: ThermalGrid, dq: float = 0.01,
                 ds: float = 1e-3, kernel: str = "heat"):
    """``u_s - kx u_xx - ky u_yy + rho u`` on interior cells, with the time derivative ``u_s``.

    Central differences in time and space; both arrays are ``(ny - 2, nx - 2)``.
    """
    h = grid.spacing
    u0 = meltpool_field(path, s, phi, grid, dq, kernel)
    u_s = (meltpool_field(path, s + ds, phi, grid, dq, kernel)
           - meltpool_field(path, s - ds, phi, grid, dq, kernel)) / (2 * ds)
    uxx = (u0[1:-1, 2:] - 2 * u0[1:-1, 1:-1] + u0[1:-1, :-2]) / h ** 2
    uyy = (u0[2:, 1:-1] - 2 * u0[1:-1, 1:-1] + u0[:-2, 1:-1]) / h ** 2
    u_s = u_s[1:-1, 1:-1]
    return u_s - phi.kappa_x * uxx - phi.kappa_y * uyy + phi.rho * u0[1:-1, 1:-1], u_s
