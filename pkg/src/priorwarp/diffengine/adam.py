from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from priorwarp.diffengine.tape import NonFiniteError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        n = len(params)
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update of ``params.flat`` in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape:
        raise ValueError(f"gradient length {grads.shape} != parameter length {params.flat.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteError(f"non-finite gradient at {bad.size} entries (first flat index {bad[0]}), step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
