"""Flow prediction and differentiable bilinear warping.

A flow field is a 2-channel :class:`FeatureField` holding per-pixel
displacements in pixels: channel 0 is ``dx`` (columns), channel 1 is
``dy`` (rows). Output pixel ``(y, x)`` samples the input at
``(y + dy, x + dx)`` from its four lattice neighbours. Neighbours that fall
outside the grid contribute zero and receive zero gradient.

At integer sample positions the flow gradient is the right-sided one
(``floor`` puts the sample on the left/top neighbour).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ConvSpec, FeatureField, ShapeMismatchError, _record, concat_channels, conv_forward


class FlowField(FeatureField):
    __slots__ = ()

    def __init__(self, values, grad=None):
        super().__init__(values, grad)
        if self.channels != 2:
            raise ShapeMismatchError(f"flow field needs 2 channels, got {self.channels}")

    @classmethod
    def from_components(cls, dx, dy) -> "FlowField":
        return cls(np.stack([np.asarray(dx, dtype=float), np.asarray(dy, dtype=float)]))

    @property
    def dx(self) -> np.ndarray:
        return self.values[0]

    @property
    def dy(self) -> np.ndarray:
        return self.values[1]


def _corners(flow: np.ndarray):
    """Neighbour indices, validity and bilinear weights for every output pixel."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow[0]
    sy = ys + flow[1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for cy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for cx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            corners.append((cy, cx, valid, wy, wx))
    return corners, fx, fy


def bilinear_warp(x: FeatureField, flow: FeatureField) -> FeatureField:
    """Resample ``x`` at ``p + flow(p)``; differentiable in both arguments."""
    if flow.channels != 2:
        raise ShapeMismatchError(f"flow must have 2 channels, got {flow.channels}")
    if x.shape[1:] != flow.shape[1:]:
        raise ShapeMismatchError(f"warp: input {x.shape[1:]} vs flow {flow.shape[1:]}")
    c, h, w = x.shape
    n = h * w
    corners, fx, fy = _corners(flow.values)

    # dense (n x n) sampling matrix, at most 4 nonzeros per row
    sampler = np.zeros((n, n), dtype=x.dtype)
    rows = np.arange(n)
    for cy, cx, valid, wy, wx in corners:
        v = valid.ravel()
        cols = (np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)).ravel()
        sampler[rows[v], cols[v]] += (wy * wx).ravel()[v]

    xf = x.values.reshape(c, n)
    result = FeatureField((xf @ sampler.T).reshape(c, h, w))

    def _backward():
        g = result.grad.reshape(c, n)
        x._accumulate((g @ sampler).reshape(c, h, w))
        vals = []
        for cy, cx, valid, _, _ in corners:
            v = x.values[:, np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)] * valid
            vals.append(v)
        v00, v01, v10, v11 = vals
        gv = result.grad
        ddx = (gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=0)
        ddy = (gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))).sum(axis=0)
        flow._accumulate(np.stack([ddx, ddy]))

    _record((result,), _backward)
    return result


@dataclass(eq=False)
class SFGSpec:
    """Flow predictor: one 3x3 conv from ``2 * channels`` to 2."""

    flow_conv: ConvSpec

    def __post_init__(self):
        if self.flow_conv.out_channels != 2 or self.flow_conv.kernel != "3x3":
            raise ShapeMismatchError("SFG flow conv must be 3x3 with 2 output channels")

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "SFGSpec":
        return cls(ConvSpec.zeros(2 * channels, 2, "3x3", dtype=dtype))


def predict_flow(f_sum_prime: FeatureField, f_roi: FeatureField, spec: SFGSpec) -> FeatureField:
    if f_sum_prime.shape[1:] != f_roi.shape[1:]:
        raise ShapeMismatchError("SFG inputs must share spatial shape")
    if f_sum_prime.channels + f_roi.channels != spec.flow_conv.in_channels:
        raise ShapeMismatchError(
            f"SFG expects {spec.flow_conv.in_channels} input channels, "
            f"got {f_sum_prime.channels} + {f_roi.channels}"
        )
    return conv_forward(concat_channels(f_sum_prime, f_roi), spec.flow_conv)


def sfg(f_sum_prime: FeatureField, f_roi: FeatureField, spec: SFGSpec,
        return_flow: bool = False):
    """Predict a flow from both inputs and warp ``f_sum_prime`` with it."""
    flow = predict_flow(f_sum_prime, f_roi, spec)
    out = bilinear_warp(f_sum_prime, flow)
    if return_flow:
        return out, flow
    return out
