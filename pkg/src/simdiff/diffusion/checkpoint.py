"""MPD1 checkpoint files: header, JSON metadata, f32 parameters, optional Adam moments."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import RejectedInputError
from .network import Architecture, Denoiser
from .optim import AdamState

MAGIC = b"MPD1"
VERSION = 1


def save_checkpoint(path, denoiser: Denoiser, meta: dict | None = None, adam: AdamState | None = None) -> None:
    meta = dict(meta or {})
    meta["architecture"] = json.loads(denoiser.arch.to_json())
    meta["n_params"] = int(denoiser.params.size)
    if adam is not None:
        meta["adam"] = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                        "beta2": adam.beta2, "eps": adam.eps}
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(denoiser.params.astype("<f4").tobytes())
        if adam is not None:
            fh.write(adam.m.astype("<f4").tobytes())
            fh.write(adam.v.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Return ``(denoiser, meta, adam_or_None)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise RejectedInputError(f"{path}: not an MPD1 checkpoint")
    version, n = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise RejectedInputError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + n])
    arch = Architecture.from_dict(meta["architecture"])
    k = arch.n_params()
    payload = np.frombuffer(raw, dtype="<f4", offset=12 + n)
    if payload.size not in (k, 3 * k):
        raise RejectedInputError(f"{path}: payload size {payload.size} does not fit {k} parameters")
    den = Denoiser(arch, payload[:k].astype(dtype))
    adam = None
    if payload.size == 3 * k and "adam" in meta:
        a = meta["adam"]
        adam = AdamState(payload[k:2 * k].astype(dtype), payload[2 * k:].astype(dtype), step=a["step"],
                         lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return den, meta, adam
