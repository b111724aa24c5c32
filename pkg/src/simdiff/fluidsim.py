"""Buoyancy-driven smoke on a closed box, stable-fluids style.

Velocities are stored in physical units (length / time) at cell centers;
row ``i`` is the physical ``y`` coordinate ``(i + 0.5) h`` and buoyancy
pushes toward larger ``i``. The box wall is the outer ring of cells, where
velocity is held at zero (no slip). Divergence is measured with central
differences on interior cells.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

from .errors import CFLViolationError, RejectedInputError
from .fields import curl, resize_bilinear, warp


@dataclass(frozen=True)
class FluidConfig:
    extent: float = 24.0
    dt: float = 0.05
    buoyancy_coeff: float = 1.0
    reference_resolution: int = 32
    pressure_solver: str = "exact"
    jacobi_iterations: int = 200


@dataclass
class FluidState:
    buoyancy: np.ndarray
    velocity: np.ndarray
    step: int = 0

    @property
    def resolution(self) -> int:
        return self.buoyancy.shape[-1]


@dataclass(frozen=True)
class FluidInit:
    """Gaussian buoyancy blobs plus one Gaussian swirl, in units of the box extent."""

    seed: int
    centers: tuple[tuple[float, float], ...]
    radii: tuple[float, ...]
    amplitudes: tuple[float, ...]
    swirl_center: tuple[float, float] = (0.5, 0.5)
    swirl_radius: float = 0.2
    swirl_strength: float = 0.0

    def __post_init__(self):
        if not (len(self.centers) == len(self.radii) == len(self.amplitudes)):
            raise RejectedInputError("blob parameter lists differ in length")
        if any(r <= 0 for r in self.radii) or self.swirl_radius <= 0:
            raise RejectedInputError("radii must be positive")
        if any(not 0 < a <= 1 for a in self.amplitudes):
            raise RejectedInputError("amplitudes must lie in (0, 1]")

    @classmethod
    def random(cls, seed: int) -> "FluidInit":
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        centers = tuple((float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.25, 0.4))) for _ in range(n))
        return cls(
            seed=seed,
            centers=centers,
            radii=tuple(float(r) for r in rng.uniform(0.08, 0.15, n)),
            amplitudes=tuple(float(a) for a in rng.uniform(0.5, 1.0, n)),
            swirl_center=(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7))),
            swirl_radius=float(rng.uniform(0.1, 0.25)),
            swirl_strength=float(rng.uniform(-0.3, 0.3)),
        )

    def to_dict(self) -> dict:
        return {"seed": self.seed, "centers": [list(c) for c in self.centers], "radii": list(self.radii),
                "amplitudes": list(self.amplitudes), "swirl_center": list(self.swirl_center),
                "swirl_radius": self.swirl_radius, "swirl_strength": self.swirl_strength}

    def sample(self, n: int, extent: float) -> tuple[np.ndarray, np.ndarray]:
        """Buoyancy and velocity sampled at the cell centers of an ``n x n`` grid."""
        u = (np.arange(n) + 0.5) / n
        X, Y = np.meshgrid(u, u)
        b = np.zeros((n, n))
        for (cx, cy), r, a in zip(self.centers, self.radii, self.amplitudes):
            b += a * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * r * r))
        # stream function psi = s R exp(-d^2 / 2R^2); v = (dpsi/dy, -dpsi/dx)
        sx, sy = self.swirl_center
        r = self.swirl_radius
        bump = self.swirl_strength * np.exp(-((X - sx) ** 2 + (Y - sy) ** 2) / (2 * r * r)) / r
        v = np.stack([-(Y - sy) * bump, (X - sx) * bump])
        return np.minimum(b, 1.0), v


# ------------------------------------------------------------------ operators


def interior_divergence(v, spacing: float = 1.0) -> np.ndarray:
    """Central-difference divergence on interior cells, shape ``(n-2, n-2)``."""
    v = np.asarray(v)
    dvx = (v[0, 1:-1, 2:] - v[0, 1:-1, :-2]) / (2 * spacing)
    dvy = (v[1, 2:, 1:-1] - v[1, :-2, 1:-1]) / (2 * spacing)
    return dvx + dvy


def _divergence_matrix(n: int) -> np.ndarray:
    """Central-difference divergence of interior velocities (boundary ring fixed at zero)."""
    m = n - 2
    idx = np.arange(m * m).reshape(m, m)
    D = np.zeros((m * m, 2 * m * m))
    for i in range(m):
        for j in range(m):
            row = idx[i, j]
            if j + 1 < m:
                D[row, idx[i, j + 1]] += 0.5
            if j - 1 >= 0:
                D[row, idx[i, j - 1]] -= 0.5
            if i + 1 < m:
                D[row, m * m + idx[i + 1, j]] += 0.5
            if i - 1 >= 0:
                D[row, m * m + idx[i - 1, j]] -= 0.5
    return D


@lru_cache(maxsize=8)
def _projector(n: int) -> np.ndarray:
    D = _divergence_matrix(n)
    return np.eye(D.shape[1]) - D.T @ linalg.pinv(D @ D.T) @ D


def _pack(v):
    return np.concatenate([v[0, 1:-1, 1:-1].ravel(), v[1, 1:-1, 1:-1].ravel()])


def _unpack(flat, n):
    m = n - 2
    v = np.zeros((2, n, n))
    v[0, 1:-1, 1:-1] = flat[:m * m].reshape(m, m)
    v[1, 1:-1, 1:-1] = flat[m * m:].reshape(m, m)
    return v


def project(v, solver: str = "exact", iterations: int = 200) -> np.ndarray:
    """Nearest field (in L2 over interior cells) with zero interior divergence and zero wall velocity.

    ``exact`` applies the cached orthogonal projector; ``jacobi`` runs a fixed
    number of Jacobi sweeps on the pressure system ``D D^T p = D v`` and is
    kept for comparison, as it converges slowly on this operator.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    if v.shape != (2, n, n) or n < 3:
        raise RejectedInputError(f"velocity must be (2, n, n) with n >= 3, got {v.shape}")
    flat = _pack(v)
    if solver == "exact":
        return _unpack(_projector(n) @ flat, n)
    if solver == "jacobi":
        D = _divergence_matrix(n)
        A = D @ D.T
        diag = np.diag(A)
        rhs = D @ flat
        p = np.zeros_like(rhs)
        safe = np.where(diag > 0, diag, 1.0)
        for _ in range(iterations):
            p = p + (rhs - A @ p) / safe
        return _unpack(flat - D.T @ p, n)
    raise RejectedInputError(f"unknown pressure solver {solver!r}")


# ------------------------------------------------------------------ dynamics


def initial_state(init: FluidInit, resolution: int, cfg: FluidConfig = FluidConfig()) -> FluidState:
    """Sample the init on the reference grid, resize to ``resolution`` and project."""
    ref = max(cfg.reference_resolution, resolution)
    b, v = init.sample(ref, cfg.extent)
    b = resize_bilinear(b, resolution, resolution)
    v = resize_bilinear(v, resolution, resolution)
    v[:, 0, :] = v[:, -1, :] = 0.0
    v[:, :, 0] = v[:, :, -1] = 0.0
    return FluidState(b, project(v, cfg.pressure_solver, cfg.jacobi_iterations), 0)


def cfl_number(state: FluidState, dt: float, extent: float) -> float:
    h = extent / state.resolution
    return float(np.max(np.abs(state.velocity))) * dt / h


def advect_and_force(state: FluidState, cfg: FluidConfig = FluidConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Semi-Lagrangian advection of both fields, then the buoyant force; no projection."""
    if cfg.dt <= 0:
        raise RejectedInputError("dt must be positive")
    cfl = cfl_number(state, cfg.dt, cfg.extent)
    if cfl > 1.0:
        raise CFLViolationError(cfl)
    ds = cfg.dt * state.resolution / cfg.extent
    b = warp(state.buoyancy, state.velocity, ds)
    v = warp(state.velocity, state.velocity, ds)
    v[1] += cfg.dt * cfg.buoyancy_coeff * b
    return b, v


def fluid_step(state: FluidState, cfg: FluidConfig = FluidConfig()) -> FluidState:
    b, v = advect_and_force(state, cfg)
    return FluidState(b, project(v, cfg.pressure_solver, cfg.jacobi_iterations), state.step + 1)


def simulate(init: FluidInit, steps: int, resolution: int, cfg: FluidConfig = FluidConfig(),
             keep_every: int = 1) -> list[FluidState]:
    """Fixed-dt rollout; returns every ``keep_every``-th state including the first and last."""
    if resolution < 3:
        raise RejectedInputError("resolution must be at least 3")
    state = initial_state(init, resolution, cfg)
    out = [state]
    for k in range(1, steps + 1):
        state = fluid_step(state, cfg)
        if k % keep_every == 0 or k == steps:
            out.append(state)
    return out


def center_of_mass_y(b) -> float:
    rows = np.arange(b.shape[-2])[:, None]
    return float(np.sum(rows * b) / np.sum(b))


# ------------------------------------------------------------------ datasets


@dataclass(frozen=True)
class FluidDataSpec:
    n: int = 224
    seed: int = 0
    fine: int = 32
    mid: int = 16
    coarse: int = 8
    horizon_steps: int = 200
    test_fraction: float = 0.1


def fluid_record(init: FluidInit, spec: FluidDataSpec, cfg: FluidConfig = FluidConfig()) -> dict:
    """Fine context/target, coarse buoyancy + vorticity (c1) and mid buoyancy (c2)."""
    fine = simulate(init, spec.horizon_steps, spec.fine, cfg, keep_every=spec.horizon_steps)
    mid = simulate(init, spec.horizon_steps, spec.mid, cfg, keep_every=spec.horizon_steps)[-1]
    coarse = simulate(init, spec.horizon_steps, spec.coarse, cfg, keep_every=spec.horizon_steps)[-1]
    h_coarse = cfg.extent / spec.coarse
    return {
        "context": fine[0].buoyancy[None],
        "target": fine[-1].buoyancy[None],
        "c1": np.stack([coarse.buoyancy, curl(coarse.velocity, h_coarse)]),
        "c2": mid.buoyancy[None],
    }


def split_ids(n: int, seed: int, test_fraction: float) -> dict[int, str]:
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    order = np.random.default_rng([seed, 9001]).permutation(n)
    test = set(order[:n_test].tolist())
    return {i: ("test" if i in test else "train") for i in range(n)}


def gen_fluid_dataset(spec: FluidDataSpec, cfg: FluidConfig = FluidConfig()):
    """Yield ``(id, split, init, record)`` for every trajectory, in id order."""
    if spec.n < 1:
        raise RejectedInputError("need at least one trajectory")
    splits = split_ids(spec.n, spec.seed, spec.test_fraction)
    for i in range(spec.n):
        init = FluidInit.random(int(np.random.default_rng([spec.seed, i]).integers(2 ** 31)))
        yield f"fluid-{i:05d}", splits[i], init, fluid_record(init, spec, cfg)


__all__ = [
    "FluidConfig", "FluidDataSpec", "advect_and_force", "FluidInit", "FluidState", "center_of_mass_y", "cfl_number",
    "fluid_record", "fluid_step", "gen_fluid_dataset", "initial_state", "interior_divergence", "project",
    "simulate", "split_ids",
]
