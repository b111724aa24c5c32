"""Dense optical flow between consecutive frames, Horn–Schunck style.

The flow ``v`` minimizes ``sum (warp(prev, v) - next)^2 + lam * sum |grad v|^2``
where ``warp`` samples ``prev`` at ``r - v``. Each iteration linearizes the
warped frame around the current flow and takes a few warm-started conjugate
gradient steps on the resulting normal equations
``a (a . v + c) + lam L v = 0`` with ``L`` the grid-graph Laplacian.
"""
from __future__ import annotations

import numpy as np

from ..errors import RejectedInputError
from ..fields import warp


def _graph_laplacian(v):
    """``L v`` for the 4-neighbor grid graph (free edges), per channel."""
    out = np.zeros_like(v)
    dx = v[..., :, 1:] - v[..., :, :-1]
    dy = v[..., 1:, :] - v[..., :-1, :]
    out[..., :, 1:] += dx
    out[..., :, :-1] -= dx
    out[..., 1:, :] += dy
    out[..., :-1, :] -= dy
    return out


def _cg(apply, rhs, x, steps: int):
    r = rhs - apply(x)
    p = r.copy()
    rr = float(np.sum(r * r))
    for _ in range(steps):
        if rr == 0.0:
            break
        ap = apply(p)
        alpha = rr / float(np.sum(p * ap))
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(np.sum(r * r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def image_gradient(f) -> np.ndarray:
    """Central-difference ``(d/dx, d/dy)`` in cell units, one-sided at edges; ``(2, H, W)``."""
    gy, gx = np.gradient(np.asarray(f, dtype=np.float64))
    return np.stack([gx, gy])


def estimate_flow(prev, nxt, lam: float = 0.1, iterations: int = 100, ds: float = 1.0,
                  inner_steps: int = 10) -> np.ndarray:
    """Flow ``(2, H, W)`` carrying ``prev`` onto ``nxt`` in cells per ``ds``."""
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 2:
        raise RejectedInputError(f"frames must be matching 2-D arrays, got {prev.shape} and {nxt.shape}")
    if lam <= 0 or iterations < 0:
        raise RejectedInputError("need lam > 0 and a non-negative iteration count")
    grad_prev = image_gradient(prev)
    v = np.zeros((2,) + prev.shape)
    for _ in range(iterations):
        warped = warp(prev, v, ds)
        # d warp(prev, v) / dv = -ds * (grad prev)(r - ds v)
        a = -ds * warp(grad_prev, v, ds)
        c = warped - np.sum(a * v, axis=0) - nxt

        def normal(u, a=a):
            return a * np.sum(a * u, axis=0)[None] + lam * _graph_laplacian(u)

        v = _cg(normal, -a * c[None], v, inner_steps)
    return v


def estimate_flows(frames, lam: float = 0.1, iterations: int = 100, ds: float = 1.0,
                   inner_steps: int = 10) -> np.ndarray:
    """Flows between consecutive frames of ``(S, H, W)``; ``(S-1, 2, H, W)``."""
    frames = np.asarray(frames, dtype=np.float64)
    return np.stack([estimate_flow(frames[k], frames[k + 1], lam, iterations, ds, inner_steps)
                     for k in range(len(frames) - 1)])


__all__ = ["estimate_flow", "estimate_flows", "image_gradient"]
