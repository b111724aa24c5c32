"""Dataset directories of trajectory records and their normalization.

A dataset directory holds ``index.json`` plus one MPF1 file per field per
record under ``<id>/``. Arrays with more than three axes (flow stacks) are
flattened to channels on disk and their shape is kept in the index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import TrainingArrays
from .errors import RejectedInputError, UnavailableSimulationError
from .fields import read_mpf, resize_bilinear, write_mpf

SCHEMA_VERSION = 1
FIELD_NAMES = ("context", "target", "c1", "c2", "masks")


@dataclass
class TrajectoryRecord:
    """One example: context frames, target frames (as channels), cheap and optional expensive outputs."""

    id: str
    split: str
    context: np.ndarray
    target: np.ndarray
    c1: np.ndarray
    c2: np.ndarray | None = None
    masks: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise RejectedInputError(f"split must be train or test, got {self.split!r}")
        if self.context.shape[-2:] != self.target.shape[-2:]:
            raise RejectedInputError("context and target must share the fine grid")

    @property
    def has_c2(self) -> bool:
        return self.c2 is not None

    def require_c2(self) -> np.ndarray:
        if self.c2 is None:
            raise UnavailableSimulationError(f"record {self.id} has no expensive simulation output")
        return self.c2

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in FIELD_NAMES if getattr(self, k) is not None}


@dataclass(frozen=True)
class MinMax:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]``, per channel when the bounds are lists."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def fit(cls, arrays, per_channel: bool) -> "MinMax":
        stacked = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])
        axes = (0, 2, 3) if per_channel else None
        lo = np.atleast_1d(stacked.min(axis=axes))
        hi = np.atleast_1d(stacked.max(axis=axes))
        hi = np.where(hi > lo, hi, lo + 1.0)
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    def _bounds(self):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        if lo.size > 1:
            # channel axis sits just before (H, W)
            lo = lo.reshape(-1, 1, 1)
            hi = hi.reshape(-1, 1, 1)
        return lo, hi

    def apply(self, x):
        lo, hi = self._bounds()
        return 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0

    def invert(self, y):
        lo, hi = self._bounds()
        return (np.asarray(y) + 1.0) * 0.5 * (hi - lo) + lo

    def scale(self) -> float:
        """Factor from physical to normalized differences (single-range maps only)."""
        return 2.0 / (self.hi[0] - self.lo[0])

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d) -> "MinMax":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


@dataclass(frozen=True)
class Normalization:
    """State fields (context, target, and a same-quantity c2) share one range; c1 is per channel."""

    state: MinMax
    c1: MinMax
    c2_is_state: bool

    @classmethod
    def fit(cls, records, c2_is_state: bool) -> "Normalization":
        train = [r for r in records if r.split == "train"] or list(records)
        if not train:
            raise RejectedInputError("cannot fit a normalization to an empty dataset")
        state = MinMax.fit([np.concatenate([r.context, r.target]) for r in train], per_channel=False)
        return cls(state, MinMax.fit([r.c1 for r in train], per_channel=True), c2_is_state)

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "c1": self.c1.to_dict(), "c2_is_state": self.c2_is_state}

    @classmethod
    def from_dict(cls, d) -> "Normalization":
        return cls(MinMax.from_dict(d["state"]), MinMax.from_dict(d["c1"]), bool(d["c2_is_state"]))


@dataclass
class Dataset:
    kind: str
    spec: dict
    records: list
    root: Path | None = None

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def by_id(self, ids) -> list:
        table = {r.id: r for r in self.records}
        missing = [i for i in ids if i not in table]
        if missing:
            raise RejectedInputError(f"unknown record ids: {missing}")
        return [table[i] for i in ids]

    @property
    def c2_is_state(self) -> bool:
        return self.kind == "fluid"

    def normalization(self) -> Normalization:
        return Normalization.fit(self.records, self.c2_is_state)


def aligned_cond(record: TrajectoryRecord, norm: Normalization, use_c1: bool) -> np.ndarray:
    """Normalized c1 resized to the fine grid, or an empty channel stack."""
    h, w = record.target.shape[-2:]
    if not use_c1:
        return np.zeros((0, h, w))
    return resize_bilinear(norm.c1.apply(record.c1), w, h)


def model_inputs(records, norm: Normalization, use_c1: bool):
    """Normalized ``(context, cond)`` batches for the denoiser."""
    context = np.stack([norm.state.apply(r.context) for r in records])
    cond = np.stack([aligned_cond(r, norm, use_c1) for r in records])
    return context, cond


def training_arrays(records, norm: Normalization, use_c1: bool) -> TrainingArrays:
    context, cond = model_inputs(records, norm, use_c1)
    target = np.stack([norm.state.apply(r.target) for r in records])
    return TrainingArrays(target=target, context=context, cond=cond)


# ------------------------------------------------------------------ directory I/O


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def write_dataset(root, kind: str, spec: dict, items) -> Path:
    """Write ``(id, split, meta, arrays)`` items and the index; returns the index path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rid, split, meta, arrays in items:
        files = {}
        shapes = {}
        (root / rid).mkdir(exist_ok=True)
        for name in FIELD_NAMES:
            arr = arrays.get(name)
            if arr is None:
                continue
            arr = np.asarray(arr)
            rel = f"{rid}/{name}.mpf"
            write_mpf(root / rel, arr.reshape((-1,) + arr.shape[-2:]))
            files[name] = rel
            shapes[name] = list(arr.shape)
        entries.append({"id": rid, "split": split, "files": files, "shapes": shapes, "meta": meta})
    index = {"schema_version": SCHEMA_VERSION, "kind": kind, "spec": spec, "records": entries}
    path = root / "index.json"
    path.write_bytes(_json_bytes(index))
    return path


def load_dataset(root) -> Dataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    if index.get("schema_version") != SCHEMA_VERSION:
        raise RejectedInputError(f"unsupported dataset schema {index.get('schema_version')!r}")
    records = []
    for e in index["records"]:
        arrays = {name: read_mpf(root / rel).reshape(e["shapes"][name]) for name, rel in e["files"].items()}
        if "c1" not in arrays:
            raise RejectedInputError(f"record {e['id']} lacks the cheap simulation output c1")
        records.append(TrajectoryRecord(e["id"], e["split"], meta=e.get("meta", {}), **arrays))
    return Dataset(index["kind"], index.get("spec", {}), records, root)


__all__ = ["Dataset", "FIELD_NAMES", "MinMax", "Normalization", "SCHEMA_VERSION", "TrajectoryRecord",
           "aligned_cond", "load_dataset", "model_inputs", "training_arrays", "write_dataset"]
