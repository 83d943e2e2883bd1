"""Raster views of flows and boundary features, written as PPM."""

from __future__ import annotations

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .formats import write_ppm


def flow_to_rgb(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: direction sets hue, magnitude sets saturation.

    ``flow`` is ``(2, H, W)`` with channel 0 = dx. Magnitudes are scaled by
    ``max_magnitude`` (default: the field maximum), so zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError("flow must have shape (2, H, W)")
    dx, dy = flow
    mag = np.hypot(dx, dy)
    top = float(mag.max()) if max_magnitude is None else float(max_magnitude)
    sat = np.clip(mag / top, 0.0, 1.0) if top > 0 else np.zeros_like(mag)
    hue = (np.arctan2(dy, dx) / (2 * np.pi)) % 1.0
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def principal_components(features: np.ndarray, k: int = 3, iters: int = 200,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` eigenvectors of the channel covariance by power iteration.

    Returns ``(components (k, C), eigenvalues (k,))``. Each component's
    sign is fixed so its largest-magnitude loading is positive.
    """
    c = features.shape[0]
    x = features.reshape(c, -1).astype(np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    cov = x @ x.T / max(x.shape[1] - 1, 1)
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    for _ in range(min(k, c)):
        v = rng.standard_normal(c)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = w / norm
        lam = float(v @ cov @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        vals.append(lam)
        cov = cov - lam * np.outer(v, v)  # deflate
    return np.array(comps), np.array(vals)


def pca_rgb(features: np.ndarray, seed: int = 0) -> np.ndarray:
    """Project ``(C, H, W)`` features on 3 principal axes, each stretched to 0..255."""
    c, h, w = features.shape
    comps, _ = principal_components(features, 3, seed=seed)
    x = features.reshape(c, -1).astype(np.float64)
    proj = comps @ (x - x.mean(axis=1, keepdims=True))
    if proj.shape[0] < 3:
        proj = np.vstack([proj, np.zeros((3 - proj.shape[0], proj.shape[1]))])
    lo = proj.min(axis=1, keepdims=True)
    span = proj.max(axis=1, keepdims=True) - lo
    span[span == 0] = 1.0
    rgb = (proj - lo) / span
    return np.round(rgb.T.reshape(h, w, 3) * 255).astype(np.uint8)


def upscale(rgb: np.ndarray, factor: int) -> np.ndarray:
    return rgb.repeat(factor, axis=0).repeat(factor, axis=1)


def write_flow_ppm(path, flow: np.ndarray, factor: int = 1, max_magnitude=None) -> None:
    write_ppm(path, upscale(flow_to_rgb(flow, max_magnitude), factor))


def write_pca_ppm(path, features: np.ndarray, factor: int = 1) -> None:
    write_ppm(path, upscale(pca_rgb(features), factor))
