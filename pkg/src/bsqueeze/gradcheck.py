"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-4


def numeric_grad(loss_fn: Callable[[], float], array: np.ndarray, step: float = DEFAULT_STEP,
                 indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``array``, perturbed in place.

    ``indices`` restricts the probe to a subset of flat positions; the rest
    of the returned array is NaN.
    """
    flat = array.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(array.shape)


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the probed entries (0 if both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def sample_indices(size: int, limit: int, rng: np.random.Generator):
    if size <= limit:
        return None
    return np.sort(rng.choice(size, limit, replace=False))
