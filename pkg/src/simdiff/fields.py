"""Grid fields and the pooling / interpolation / warping primitives.

All operations act on the trailing ``(H, W)`` axes of numpy arrays, with
``y`` as the row index and ``x`` as the column index, so they broadcast over
any leading batch or channel axes. Velocity arrays carry their two
components on the axis just before ``(H, W)``: ``v[..., 0, :, :]`` is
``v_x`` and ``v[..., 1, :, :]`` is ``v_y``.

The small dataclasses below are containers for single fields at I/O
boundaries; each exposes ``__array__`` so it can be passed to any operation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInputError

MPF_MAGIC = b"MPF1"


@dataclass(frozen=True)
class Field2D:
    data: np.ndarray
    extent: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise RejectedInputError(f"Field2D needs a 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RejectedInputError("Field2D samples must be finite")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class VelocityField2D:
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        vx = np.asarray(self.vx, dtype=np.float64)
        vy = np.asarray(self.vy, dtype=np.float64)
        if vx.shape != vy.shape or vx.ndim != 2:
            raise RejectedInputError("velocity components must be 2-D arrays of equal shape")
        object.__setattr__(self, "vx", vx)
        object.__setattr__(self, "vy", vy)

    def __array__(self, dtype=None, copy=None):
        out = np.stack([self.vx, self.vy])
        return out if dtype is None else out.astype(dtype)


@dataclass(frozen=True)
class Mask2D:
    member: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.member)
        if m.ndim != 2:
            raise RejectedInputError("Mask2D needs a 2-D array")
        if not np.all((m == 0) | (m == 1)):
            raise RejectedInputError("mask membership must be 0 or 1")
        object.__setattr__(self, "member", m.astype(bool))

    def __array__(self, dtype=None, copy=None):
        return self.member if dtype is None else self.member.astype(dtype)


def avg_pool(f, k: int) -> np.ndarray:
    """Mean over non-overlapping ``k x k`` patches."""
    f = np.asarray(f)
    h, w = f.shape[-2:]
    if k < 1 or h % k or w % k:
        raise RejectedInputError(f"pool factor {k} does not divide field shape {(h, w)}")
    if k == 1:
        return f.copy()
    blocks = f.reshape(*f.shape[:-2], h // k, k, w // k, k)
    return blocks.mean(axis=(-3, -1))


def avg_pool_adjoint(g, k: int) -> np.ndarray:
    g = np.asarray(g)
    if k == 1:
        return g.copy()
    up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
    return up / (k * k)


def _corners(coord, n: int):
    """Lower index, upper index and fractional weight for clamped coordinates."""
    c = np.clip(coord, 0.0, n - 1)
    lo = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = c - lo
    return lo, hi, frac


def _gather(f, flat_idx):
    h, w = f.shape[-2:]
    lead = np.broadcast_shapes(f.shape[:-2], flat_idx.shape[:-2])
    f_flat = np.broadcast_to(f, lead + (h, w)).reshape(lead + (h * w,))
    idx = np.broadcast_to(flat_idx, lead + flat_idx.shape[-2:]).reshape(lead + (-1,))
    return np.take_along_axis(f_flat, idx, axis=-1).reshape(lead + flat_idx.shape[-2:])


def bilinear_sample(f, x, y):
    """Interpolate ``f`` at column ``x``, row ``y``; coordinates clamp to the grid.

    ``x`` and ``y`` may be scalars or arrays (broadcast against each other).
    For a scalar coordinate pair on a 2-D field a float is returned.
    """
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape[-2:]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scalar = x.ndim == 0 and y.ndim == 0
    x, y = np.broadcast_arrays(np.atleast_2d(x), np.atleast_2d(y))
    x0, x1, wx = _corners(x, w)
    y0, y1, wy = _corners(y, h)
    v00 = _gather(f, y0 * w + x0)
    v01 = _gather(f, y0 * w + x1)
    v10 = _gather(f, y1 * w + x0)
    v11 = _gather(f, y1 * w + x1)
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    if scalar and f.ndim == 2:
        return float(out[0, 0])
    return out


def _backtrace(v, ds: float):
    v = np.asarray(v, dtype=np.float64)
    h, w = v.shape[-2:]
    jj = np.arange(w, dtype=np.float64)[None, :]
    ii = np.arange(h, dtype=np.float64)[:, None]
    return jj - v[..., 0, :, :] * ds, ii - v[..., 1, :, :] * ds


def warp(f_prev, v, ds: float = 1.0) -> np.ndarray:
    """Semi-Lagrangian warp: each cell samples ``f_prev`` at its back-traced point."""
    f_prev = np.asarray(f_prev, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-3] != 2 or v.shape[-2:] != f_prev.shape[-2:]:
        raise RejectedInputError(
            f"velocity shape {v.shape} does not match field shape {f_prev.shape}")
    x, y = _backtrace(v, ds)
    return bilinear_sample(f_prev, x, y)


def warp_adjoint(g, v, ds: float = 1.0) -> np.ndarray:
    """Transpose of ``warp`` in its field argument (scatter with the same weights)."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = g.shape[-2:]
    x, y = _backtrace(v, ds)
    x0, x1, wx = _corners(x, w)
    y0, y1, wy = _corners(y, h)
    lead = np.broadcast_shapes(g.shape[:-2], x.shape[:-2])
    g = np.broadcast_to(g, lead + (h, w)).reshape(-1, h * w)
    nb = g.shape[0]
    offsets = (np.arange(nb) * h * w)[:, None]
    out = np.zeros(nb * h * w)
    for yi, xi, wgt in (
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x1, (1 - wy) * wx),
        (y1, x0, wy * (1 - wx)),
        (y1, x1, wy * wx),
    ):
        idx = np.broadcast_to(yi * w + xi, lead + (h, w)).reshape(nb, h * w) + offsets
        wb = np.broadcast_to(wgt, lead + (h, w)).reshape(nb, h * w)
        out += np.bincount(idx.ravel(), weights=(wb * g).ravel(), minlength=nb * h * w)
    return out.reshape(lead + (h, w))


def mask_project(f, m) -> np.ndarray:
    f = np.asarray(f)
    m = np.asarray(m)
    if m.shape[-2:] != f.shape[-2:]:
        raise RejectedInputError(f"mask shape {m.shape} does not match field shape {f.shape}")
    return np.where(m.astype(bool), f, 0.0)


def resize_bilinear(f, width: int, height: int) -> np.ndarray:
    """Bilinear resampling with cell-center alignment between the two grids."""
    if width < 1 or height < 1:
        raise RejectedInputError("target size must be at least 1x1")
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape[-2:]
    if (h, w) == (height, width):
        return f.copy()
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    return bilinear_sample(f, xs[None, :], ys[:, None])


def curl(v, spacing: float = 1.0) -> np.ndarray:
    """Scalar vorticity dv_y/dx - dv_x/dy by central differences (one-sided at edges)."""
    v = np.asarray(v, dtype=np.float64)
    dvy_dx = np.gradient(v[..., 1, :, :], spacing, axis=-1)
    dvx_dy = np.gradient(v[..., 0, :, :], spacing, axis=-2)
    return dvy_dx - dvx_dy


# ---------------------------------------------------------------- file formats


def write_mpf(path, channels) -> None:
    """Write ``(C, H, W)`` or ``(H, W)`` samples as an MPF1 file."""
    arr = np.asarray(channels, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise RejectedInputError(f"MPF1 stores (C, H, W) arrays, got shape {arr.shape}")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(MPF_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_mpf(path) -> np.ndarray:
    """Read an MPF1 file as a float64 ``(C, H, W)`` array."""
    raw = Path(path).read_bytes()
    if raw[:4] != MPF_MAGIC:
        raise RejectedInputError(f"{path}: not an MPF1 file")
    w, h, c = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    if data.size != w * h * c:
        raise RejectedInputError(f"{path}: payload has {data.size} samples, expected {w * h * c}")
    return data.reshape(c, h, w).astype(np.float64)


def write_pgm(path, f) -> None:
    """ASCII PGM (P2) preview, min-max normalized to 8 bits."""
    f = np.asarray(f, dtype=np.float64)
    lo, hi = float(f.min()), float(f.max())
    scaled = np.zeros_like(f) if hi == lo else (f - lo) / (hi - lo)
    px = np.round(scaled * 255).astype(int)
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(map(str, row)) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")
