"""Bias-corrected Adam."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RejectedInputError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_update(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One Adam step; updates ``state`` and ``params`` in place and returns ``params``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise RejectedInputError("parameter, gradient and moment shapes must match")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype, copy=False)
    return params
