"""Synthetic thermal video: a moving melt pool plus ballistic spatter particles.

Particles are born at the laser position with outward velocities, fly in
straight lines, cool exponentially and disappear once cold or off the grid.
Frames are the melt-pool field plus one Gaussian splat per particle, clamped
to ``[0, 1]``. Positions are in physical units, like the grid coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import RejectedInputError
from .heat import HeatParams, LaserPath, ThermalGrid, meltpool_field


@dataclass(frozen=True)
class Particles:
    """Arrays over particles: ``positions (P, 2)`` as ``(x, y)``, ``velocities (P, 2)``,
    ``temperatures (P,)``, ``decay (P,)`` and splat ``widths (P,)``."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    temperatures: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decay: np.ndarray = field(default_factory=lambda: np.zeros(0))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.temperatures)
        if (np.shape(self.positions) != (n, 2) or np.shape(self.velocities) != (n, 2)
                or len(self.decay) != n or len(self.widths) != n):
            raise RejectedInputError("particle arrays disagree in length")
        if n and (np.any(self.temperatures <= 0) or np.any(self.temperatures > 1)):
            raise RejectedInputError("particle temperatures must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.temperatures)

    def select(self, keep) -> "Particles":
        return Particles(self.positions[keep], self.velocities[keep], self.temperatures[keep],
                         self.decay[keep], self.widths[keep])

    @staticmethod
    def concat(a: "Particles", b: "Particles") -> "Particles":
        return Particles(*(np.concatenate([x, y]) for x, y in (
            (a.positions, b.positions), (a.velocities, b.velocities), (a.temperatures, b.temperatures),
            (a.decay, b.decay), (a.widths, b.widths))))


@dataclass(frozen=True)
class SpawnConfig:
    """Per-step Poisson birth rate and the ranges new particles draw from."""

    rate: float = 0.8
    speed: tuple[float, float] = (1.0, 2.5)
    temperature: tuple[float, float] = (0.5, 1.0)
    decay: tuple[float, float] = (0.2, 0.5)
    width: tuple[float, float] = (0.6, 0.9)
    min_temperature: float = 0.1


@dataclass(frozen=True)
class ThermalScene:
    grid: ThermalGrid
    path: LaserPath
    params: HeatParams
    particles: Particles = field(default_factory=Particles)
    frame_interval: float = 1.0
    time: float = 1.0
    seed: int = 0
    step: int = 0
    spawn: SpawnConfig = field(default_factory=SpawnConfig)

    def __post_init__(self):
        if self.frame_interval <= 0:
            raise RejectedInputError("frame interval must be positive")

    @property
    def quadrature_step(self) -> float:
        return self.frame_interval / 20.0


def _spawn(scene: ThermalScene, rng: np.random.Generator) -> Particles:
    cfg = scene.spawn
    n = int(rng.poisson(cfg.rate)) if cfg.rate > 0 else 0
    if n == 0:
        return Particles()
    lx, ly, power = scene.path.at(scene.time)
    if power <= 0:
        return Particles()
    angle = rng.uniform(0.0, 2 * np.pi, n)
    speed = rng.uniform(*cfg.speed, n)
    return Particles(
        positions=np.tile([float(lx), float(ly)], (n, 1)),
        velocities=np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1),
        temperatures=rng.uniform(*cfg.temperature, n),
        decay=rng.uniform(*cfg.decay, n),
        widths=rng.uniform(*cfg.width, n),
    )


def spatter_step(scene: ThermalScene) -> ThermalScene:
    """Advance one frame interval: fly, cool, cull, then spawn at the laser."""
    ds = scene.frame_interval
    p = scene.particles
    moved = Particles(p.positions + ds * p.velocities, p.velocities,
                      p.temperatures * np.exp(-p.decay * ds), p.decay, p.widths)
    xs, ys = scene.grid.coords()
    x, y = moved.positions[:, 0], moved.positions[:, 1]
    keep = ((moved.temperatures >= scene.spawn.min_temperature)
            & (x >= xs[0]) & (x <= xs[-1]) & (y >= ys[0]) & (y <= ys[-1]))
    survivors = moved.select(keep)
    advanced = replace(scene, time=scene.time + ds, step=scene.step + 1)
    born = _spawn(advanced, np.random.default_rng([scene.seed, scene.step]))
    return replace(advanced, particles=Particles.concat(survivors, born))


def splat_particles(particles: Particles, grid: ThermalGrid) -> np.ndarray:
    """Sum of ``T exp(-|r - p|^2 / (2 w^2))`` over particles; ``(ny, nx)``."""
    xs, ys = grid.coords()
    if len(particles) == 0:
        return np.zeros((grid.ny, grid.nx))
    gx = np.exp(-(xs[None, :] - particles.positions[:, :1]) ** 2 / (2 * particles.widths[:, None] ** 2))
    gy = np.exp(-(ys[None, :] - particles.positions[:, 1:]) ** 2 / (2 * particles.widths[:, None] ** 2))
    return (gy * particles.temperatures[:, None]).T @ gx


def render_frame(scene: ThermalScene, phi: HeatParams | None = None) -> np.ndarray:
    """Melt pool at the scene time plus splatted particles, clamped to ``[0, 1]``."""
    phi = scene.params if phi is None else phi
    melt = meltpool_field(scene.path, scene.time, phi, scene.grid, dq=scene.quadrature_step)
    return np.clip(melt + splat_particles(scene.particles, scene.grid), 0.0, 1.0)


def spatter_mask(meltpool, threshold: float = 0.15) -> np.ndarray:
    """True where the melt pool is below ``threshold`` times its maximum (the spatter region)."""
    if not 0 < threshold < 1:
        raise RejectedInputError("threshold must lie in (0, 1)")
    m = np.asarray(meltpool, dtype=np.float64)
    return m < threshold * np.max(m) if np.max(m) > 0 else np.ones(m.shape, dtype=bool)


__all__ = ["Particles", "SpawnConfig", "ThermalScene", "render_frame", "spatter_mask", "spatter_step",
           "splat_particles"]
