"""Central finite-difference oracle for checking tape gradients."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f, x: np.ndarray, indices=None, step: float = FD_STEP) -> np.ndarray:
    """d f / d x[idx] by central differences; ``x`` is perturbed in place and restored.

    ``indices`` are flat indices into x; all entries when omitted.
    """
    flat = x.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(f())
        flat[idx] = orig - step
        fm = float(f())
        flat[idx] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def max_relative_error(f, x: np.ndarray, analytic: np.ndarray, indices=None,
                       step: float = FD_STEP) -> float:
    if indices is None:
        indices = np.arange(x.size)
    num = numeric_grad(f, x, indices, step)
    return float(np.max(relative_error(np.asarray(analytic).reshape(-1)[indices], num)))
