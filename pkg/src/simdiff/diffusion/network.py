"""Compact convolutional noise predictor with hand-written reverse mode.

Layout of one forward pass (``C`` = noisy target channels)::

    h0 = concat(x_t, context, cond)                       # channels-last
    h1 = silu(film(conv1(h0), t))                         # width w1
    h2 = silu(conv2(h1))                                  # width w2
    h3 = silu(film(conv3(h2), t))                         # width w3
    h4 = silu(conv4(h3))                                  # width w4
    eps_hat = conv_out(h4) + skip(x_t)                    # C channels

All convolutions are 3x3, stride 1, zero padded. ``film`` applies a
per-channel ``a * (1 + scale) + shift`` whose scale and shift come from a
one-hidden-layer MLP on a sinusoidal embedding of ``t``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import RejectedInputError

WIDTHS = (32, 64, 64, 32)


@dataclass(frozen=True)
class Architecture:
    target_channels: int = 1
    context_channels: int = 1
    cond_channels: int = 0
    widths: tuple[int, int, int, int] = WIDTHS
    time_dim: int = 32
    time_hidden: int = 64

    @property
    def in_channels(self) -> int:
        return self.target_channels + self.context_channels + self.cond_channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def segments(self) -> list[tuple[str, tuple[int, ...]]]:
        w1, w2, w3, w4 = self.widths
        c, th, td = self.target_channels, self.time_hidden, self.time_dim
        return [
            ("time_w", (th, td)), ("time_b", (th,)),
            ("film1_w", (2 * w1, th)), ("film1_b", (2 * w1,)),
            ("film3_w", (2 * w3, th)), ("film3_b", (2 * w3,)),
            ("conv1_w", (w1, self.in_channels, 3, 3)), ("conv1_b", (w1,)),
            ("conv2_w", (w2, w1, 3, 3)), ("conv2_b", (w2,)),
            ("conv3_w", (w3, w2, 3, 3)), ("conv3_b", (w3,)),
            ("conv4_w", (w4, w3, 3, 3)), ("conv4_b", (w4,)),
            ("out_w", (c, w4, 3, 3)), ("out_b", (c,)),
            ("skip_w", (c, c, 3, 3)),
        ]

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.segments())


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


def _silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


_TAPS = [(di, dj) for di in range(3) for dj in range(3)]


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _conv3x3(xp, wgt):
    """'Same' 3x3 convolution of padded NHWC ``xp`` with ``(Cout, C, 3, 3)`` weights.

    One matmul evaluates every tap at every padded position; the output sums
    the nine shifted tap planes.
    """
    b, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    cout = wgt.shape[0]
    y = (xp.reshape(-1, c) @ wgt.transpose(1, 2, 3, 0).reshape(c, 9 * cout)).reshape(b, hp, wp, 3, 3, cout)
    out = y[:, :h, :w, 0, 0, :].copy()
    for di, dj in _TAPS[1:]:
        out += y[:, di:di + h, dj:dj + w, di, dj, :]
    return out


def _conv3x3_weight_grad(g, xp):
    """Weight gradient ``(Cout, C, 3, 3)`` for output gradient ``g`` (NHWC)."""
    b, h, w, cout = g.shape
    c = xp.shape[-1]
    gf = g.reshape(-1, cout).T
    dw = np.empty((cout, c, 3, 3), dtype=g.dtype)
    for di, dj in _TAPS:
        dw[:, :, di, dj] = gf @ xp[:, di:di + h, dj:dj + w, :].reshape(-1, c)
    return dw


def _conv3x3_input_grad(g, wgt):
    """Gradient with respect to the unpadded input."""
    b, h, w, cout = g.shape
    c = wgt.shape[1]
    q = (g.reshape(-1, cout) @ wgt.transpose(0, 2, 3, 1).reshape(cout, 9 * c)).reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=g.dtype)
    for di, dj in _TAPS:
        dxp[:, di:di + h, dj:dj + w, :] += q[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class Denoiser:
    arch: Architecture
    params: np.ndarray
    _views: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.params.shape != (self.arch.n_params(),):
            raise RejectedInputError(
                f"parameter vector has {self.params.size} entries, architecture needs {self.arch.n_params()}")
        self._bind()

    def _bind(self):
        self._views = {}
        off = 0
        for name, shape in self.arch.segments():
            n = int(np.prod(shape))
            self._views[name] = self.params[off:off + n].reshape(shape)
            off += n

    @property
    def dtype(self):
        return self.params.dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def segment_slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for name, shape in self.arch.segments():
            n = int(np.prod(shape))
            out[name] = slice(off, off + n)
            off += n
        return out

    @classmethod
    def zeros(cls, arch: Architecture, dtype=np.float64) -> "Denoiser":
        return cls(arch, np.zeros(arch.n_params(), dtype=dtype))

    @classmethod
    def initialize(cls, arch: Architecture, seed: int, dtype=np.float64) -> "Denoiser":
        """He-normal convolutions, small FiLM and output weights, zero biases and skip."""
        rng = np.random.default_rng(seed)
        params = np.zeros(arch.n_params())
        off = 0
        for name, shape in arch.segments():
            n = int(np.prod(shape))
            if not name.endswith("_b") and name != "skip_w":
                std = np.sqrt(2.0 / int(np.prod(shape[1:])))
                if name.startswith("film"):
                    std = 0.02
                elif name == "out_w":
                    std *= 0.1
                params[off:off + n] = rng.normal(0.0, std, n)
            off += n
        return cls(arch, params.astype(dtype))

    def copy(self) -> "Denoiser":
        return Denoiser(self.arch, self.params.copy())

    def astype(self, dtype) -> "Denoiser":
        return Denoiser(self.arch, self.params.astype(dtype))

    # ------------------------------------------------------------------ forward

    def _inputs(self, x_t, context, cond):
        a = self.arch
        x_t = np.asarray(x_t)
        b, c, h, w = x_t.shape
        if c != a.target_channels:
            raise RejectedInputError(f"expected {a.target_channels} target channels, got {c}")
        parts = [x_t]
        for arr, n, label in ((context, a.context_channels, "context"), (cond, a.cond_channels, "cond")):
            if n == 0:
                continue
            arr = np.asarray(arr)
            if arr.shape != (b, n, h, w):
                raise RejectedInputError(f"{label} shape {arr.shape} != {(b, n, h, w)}")
            parts.append(arr)
        h0 = np.concatenate(parts, axis=1).astype(self.dtype, copy=False)
        return np.ascontiguousarray(h0.transpose(0, 2, 3, 1))

    def _conv(self, x, name):
        xp = _pad(x)
        out = _conv3x3(xp, self[name + "_w"])
        bias = self._views.get(name + "_b")
        if bias is not None:
            out += bias
        return out, xp

    def _forward(self, x_t, t, context, cond):
        a = self.arch
        cache = {}
        h0 = self._inputs(x_t, context, cond)
        b = h0.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        emb = time_embedding(t, a.time_dim).astype(self.dtype)
        z = emb @ self["time_w"].T + self["time_b"]
        e = _silu(z)
        f1 = e @ self["film1_w"].T + self["film1_b"]
        f3 = e @ self["film3_w"].T + self["film3_b"]
        w1, _, w3, _ = a.widths
        s1, sh1 = f1[:, :w1], f1[:, w1:]
        s3, sh3 = f3[:, :w3], f3[:, w3:]
        cache.update(emb=emb, z=z, e=e, s1=s1, s3=s3)

        a1, cache["pad1"] = self._conv(h0, "conv1")
        a1m = a1 * (1 + s1[:, None, None, :]) + sh1[:, None, None, :]
        h1 = _silu(a1m)
        a2, cache["pad2"] = self._conv(h1, "conv2")
        h2 = _silu(a2)
        a3, cache["pad3"] = self._conv(h2, "conv3")
        a3m = a3 * (1 + s3[:, None, None, :]) + sh3[:, None, None, :]
        h3 = _silu(a3m)
        a4, cache["pad4"] = self._conv(h3, "conv4")
        h4 = _silu(a4)
        out, cache["pad_out"] = self._conv(h4, "out")
        xt_nhwc = h0[..., :a.target_channels]
        skip, cache["pad_skip"] = self._conv(xt_nhwc, "skip")
        out = out + skip
        cache.update(a1=a1, a1m=a1m, a2=a2, a3=a3, a3m=a3m, a4=a4)
        return out, cache

    def predict_noise(self, x_t, t, context=None, cond=None) -> np.ndarray:
        """Predicted noise, shape ``(B, C, H, W)`` like ``x_t``."""
        out, _ = self._forward(x_t, t, context, cond)
        return out.transpose(0, 3, 1, 2)

    # ----------------------------------------------------------------- backward

    def loss_and_grad(self, x_t, t, context, cond, eps_true):
        """Loss ``sum_b mean_pixels (eps_hat - eps)^2`` and its exact parameter gradient."""
        out, cache = self._forward(x_t, t, context, cond)
        eps_true = np.asarray(eps_true, dtype=self.dtype).transpose(0, 2, 3, 1)
        diff = out - eps_true
        per_example = diff.size // diff.shape[0]
        loss = float(np.sum(diff.astype(np.float64) ** 2) / per_example)
        g_out = (2.0 / per_example) * diff
        return loss, self._backward(g_out, cache)

    def _backward(self, g_out, cache) -> np.ndarray:
        grad = np.zeros_like(self.params)
        sl = self.segment_slices()

        def put(name, val):
            grad[sl[name]] = val.ravel()

        def conv_back(g, name, xp, need_input=True):
            put(name + "_w", _conv3x3_weight_grad(g, xp))
            if name + "_b" in sl:
                put(name + "_b", g.sum(axis=(0, 1, 2)))
            if need_input:
                return _conv3x3_input_grad(g, self[name + "_w"])
            return None

        conv_back(g_out, "skip", cache["pad_skip"], need_input=False)
        dh4 = conv_back(g_out, "out", cache["pad_out"])
        da4 = dh4 * _silu_grad(cache["a4"])
        dh3 = conv_back(da4, "conv4", cache["pad4"])
        da3m = dh3 * _silu_grad(cache["a3m"])
        da3 = da3m * (1 + cache["s3"][:, None, None, :])
        ds3 = np.sum(da3m * cache["a3"], axis=(1, 2))
        dsh3 = np.sum(da3m, axis=(1, 2))
        dh2 = conv_back(da3, "conv3", cache["pad3"])
        da2 = dh2 * _silu_grad(cache["a2"])
        dh1 = conv_back(da2, "conv2", cache["pad2"])
        da1m = dh1 * _silu_grad(cache["a1m"])
        da1 = da1m * (1 + cache["s1"][:, None, None, :])
        ds1 = np.sum(da1m * cache["a1"], axis=(1, 2))
        dsh1 = np.sum(da1m, axis=(1, 2))
        conv_back(da1, "conv1", cache["pad1"], need_input=False)

        e = cache["e"]
        df1 = np.concatenate([ds1, dsh1], axis=1)
        df3 = np.concatenate([ds3, dsh3], axis=1)
        put("film1_w", df1.T @ e)
        put("film1_b", df1.sum(axis=0))
        put("film3_w", df3.T @ e)
        put("film3_b", df3.sum(axis=0))
        de = df1 @ self["film1_w"] + df3 @ self["film3_w"]
        dz = de * _silu_grad(cache["z"])
        put("time_w", dz.T @ cache["emb"])
        put("time_b", dz.sum(axis=0))
        return grad
