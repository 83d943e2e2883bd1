"""Binary morphology and the four supervision rasters.

Masks are 2-D numpy arrays with values in {0, 1}; results are ``bool``.
Dilation/erosion use a ``k x k`` square window clamped to the image, so a
full-frame mask is a fixed point of both. The Laplacian boundary rule uses
zero padding instead, which flags object pixels lying on the image frame.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

INSTANCE_KERNEL = 5
SEMANTIC_KERNEL = 15

_LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]])


class InvalidKernelError(ValueError):
    pass


class Targets(NamedTuple):
    gs: np.ndarray
    gb: np.ndarray
    gc: np.ndarray
    ge: np.ndarray


def check_kernel(k) -> int:
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise InvalidKernelError(f"kernel size must be an integer, got {k!r}")
    if k < 1 or k % 2 == 0:
        raise InvalidKernelError(f"kernel size must be odd and >= 1, got {k}")
    return int(k)


def as_mask(mask) -> np.ndarray:
    """Validate a {0,1} raster and return it as a bool array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def _window_reduce(mask: np.ndarray, k: int, reduce) -> np.ndarray:
    # separable square window; edge padding == clamping for max/min
    r = k // 2
    padded = np.pad(mask, r, mode="edge")
    h, w = mask.shape
    rows = padded[:, 0:w].copy()
    for d in range(1, k):
        rows = reduce(rows, padded[:, d:d + w])
    out = rows[0:h]
    for d in range(1, k):
        out = reduce(out, rows[d:d + h])
    return out


def dilate(mask, k: int) -> np.ndarray:
    m = as_mask(mask)
    k = check_kernel(k)
    if k == 1:
        return m.copy()
    return _window_reduce(m, k, np.logical_or)


def erode(mask, k: int) -> np.ndarray:
    m = as_mask(mask)
    k = check_kernel(k)
    if k == 1:
        return m.copy()
    return _window_reduce(m, k, np.logical_and)


def squeeze_targets(mask, k: int = INSTANCE_KERNEL) -> tuple[np.ndarray, np.ndarray]:
    """Contraction band (outside ring) and expansion band (inside ring)."""
    m = as_mask(mask)
    gc = dilate(m, k) & ~m
    ge = m & ~erode(m, k)
    return gc, ge


def laplacian_response(mask) -> np.ndarray:
    m = as_mask(mask).astype(np.int64)
    h, w = m.shape
    p = np.pad(m, 1)
    out = np.zeros((h, w), dtype=np.int64)
    for a in range(3):
        for b in range(3):
            out += _LAPLACIAN[a, b] * p[a:a + h, b:b + w]
    return out


def boundary_target(mask) -> np.ndarray:
    return laplacian_response(mask) != 0


def make_targets(mask, k: int = INSTANCE_KERNEL) -> Targets:
    gs = as_mask(mask)
    gc, ge = squeeze_targets(gs, k)
    return Targets(gs.copy(), boundary_target(gs), gc, ge)


def per_class_targets(label_map, num_classes: int, k: int = SEMANTIC_KERNEL) -> list[Targets]:
    """Binarize each class of a label raster and build its four targets."""
    labels = np.asarray(label_map)
    if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("label_map must be a 2-D integer raster")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]"
        )
    check_kernel(k)
    return [make_targets(labels == c, k) for c in range(num_classes)]
