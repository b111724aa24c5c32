"""Sample-quality metrics, the flow consistency score and Wasserstein estimators."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtri

from .errors import RejectedInputError, UndefinedScoreError
from .fields import mask_project, warp


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / err))


def ssim(a, b, peak: float = 1.0, window: int = 8) -> float:
    """Single-scale SSIM, uniform ``window x window`` patches at stride 1, averaged."""
    a, b = _pair(a, b)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def consistency_score(frames, flows, masks, ds: float = 1.0) -> float:
    """Sum over transitions of ``||P(warp(x_{s-1}, v_s) - x_s)||^2 / ||P(x_{s-1})||``.

    ``frames`` is ``(S, H, W)``, ``flows`` ``(S-1, 2, H, W)`` and ``masks``
    either one ``(H, W)`` mask or one per transition.
    """
    frames = np.asarray(frames, dtype=np.float64)
    flows = np.asarray(flows, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if len(flows) != len(frames) - 1:
        raise RejectedInputError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (len(flows),) + masks.shape)
    if len(masks) != len(flows):
        raise RejectedInputError(f"need one mask per transition, got {len(masks)}")
    total = 0.0
    for s in range(1, len(frames)):
        m = masks[s - 1]
        denom = float(np.linalg.norm(mask_project(frames[s - 1], m)))
        if denom == 0.0:
            raise UndefinedScoreError(f"masked previous frame {s - 1} has zero norm")
        resid = mask_project(warp(frames[s - 1], flows[s - 1], ds) - frames[s], m)
        total += float(np.sum(resid ** 2)) / denom
    return total


def wasserstein_1d(samples_a, samples_b) -> float:
    """W2 between two equal-size empirical distributions via sorted pairing."""
    a = np.sort(np.ravel(samples_a).astype(np.float64))
    b = np.sort(np.ravel(samples_b).astype(np.float64))
    if a.size == 0 or b.size == 0:
        raise RejectedInputError("empty sample set")
    if a.size != b.size:
        raise RejectedInputError(f"sample counts differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def wasserstein_to_normal(samples, mean: float, std: float) -> float:
    """W2 between samples and ``N(mean, std^2)`` using the normal quantiles at ``(i - 1/2)/n``."""
    x = np.sort(np.ravel(samples).astype(np.float64))
    if x.size == 0:
        raise RejectedInputError("empty sample set")
    q = mean + std * ndtri((np.arange(1, x.size + 1) - 0.5) / x.size)
    return float(np.sqrt(np.mean((x - q) ** 2)))


def projection_directions(dim: int, n_projections: int, seed: int) -> np.ndarray:
    if n_projections < 1:
        raise RejectedInputError("need at least one projection")
    d = np.random.default_rng(seed).standard_normal((n_projections, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_wasserstein_2d(fields_a, fields_b, n_projections: int = 64, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D W2 between projected field samples."""
    a = np.asarray(fields_a, dtype=np.float64).reshape(len(fields_a), -1)
    b = np.asarray(fields_b, dtype=np.float64).reshape(len(fields_b), -1)
    if a.shape[1] != b.shape[1]:
        raise RejectedInputError("field sizes differ")
    dirs = projection_directions(a.shape[1], n_projections, seed)
    pa = a @ dirs.T
    pb = b @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))


# ------------------------------------------------------------------ reports


@dataclass
class MetricReport:
    ids: list[str] = field(default_factory=list)
    values: dict[str, list[float]] = field(default_factory=dict)
    split: str = "test"

    def add(self, record_id: str, **metrics: float) -> None:
        self.ids.append(record_id)
        for k, v in metrics.items():
            self.values.setdefault(k, []).append(float(v))

    @property
    def count(self) -> int:
        return len(self.ids)

    def aggregate(self, name: str) -> tuple[float, float | None]:
        """Mean and the n-1 standard deviation (``None`` for a single sample)."""
        vals = np.asarray(self.values[name])
        finite = vals[np.isfinite(vals)]
        mean = float(finite.mean()) if finite.size else math.inf
        std = float(finite.std(ddof=1)) if finite.size > 1 else None
        return mean, std

    def sem(self, name: str) -> float:
        _, std = self.aggregate(name)
        return 0.0 if std is None else std / math.sqrt(self.count)

    def write_csv(self, path, columns=("mse", "psnr", "ssim", "consistency")) -> None:
        def fmt(v):
            return "" if v is None else ("inf" if v == math.inf else f"{v:.9g}")

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *columns, "split"])
            for i, rid in enumerate(self.ids):
                w.writerow([rid, *(fmt(self.values[c][i]) if c in self.values else "" for c in columns),
                            self.split])
            w.writerow(["aggregate", *(fmt(self.aggregate(c)[0]) if c in self.values else "" for c in columns),
                        self.split])

    def summary(self) -> dict:
        out = {"count": self.count, "lpips": "unavailable"}
        for name in sorted(self.values):
            mean, std = self.aggregate(name)
            out[name] = {"mean": mean if math.isfinite(mean) else "inf", "std": std}
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
