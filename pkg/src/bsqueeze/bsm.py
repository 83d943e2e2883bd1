"""Toy encoder, mask head and the boundary squeeze block.

Data flow for one sample (defaults in brackets)::

    image (1 x 28 x 28)
      enc1 3x3 -> relu --------------------- low 1x1 -> avgpool -> f_roi_low
                -> avgpool -> enc2 3x3 -> relu -> enc3 3x3 -> relu -> f_roi (C x 14 x 14)
    f_roi -> head1..4 (3x3 + relu) -> f_mask
    f_sum = f_roi + f_roi_low
    per squeeze branch (con, exp):
      f_sum' = relu(conv(relu(conv(f_sum))))
      F_branch = warp(f_sum', flow_conv(concat(f_sum', f_roi)))
    F_boundary = F_con + F_exp + f_roi [+ f_mask]
    seg feature = f_mask [+ b2m(F_boundary)]
    every branch -> deconv 2x2 -> relu -> 1x1 -> logits (1 x 28 x 28)

Branches that are not in ``cfg.branches`` are left out of the graph
entirely; with only ``seg`` this is the plain head.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import morphology
from .losses import BRANCHES
from .numcore import (
    ConvSpec,
    FeatureField,
    ShapeMismatchError,
    add,
    add_n,
    avg_pool2,
    conv_forward,
    relu_forward,
    sigmoid,
)
from .warp import FlowField, SFGSpec, sfg

SQUEEZE_BRANCHES = ("con", "exp")


@dataclass
class BSMConfig:
    feat_channels: int = 32
    grid_size: int = 14
    kernel_size: int = morphology.INSTANCE_KERNEL
    low_level_enabled: bool = True
    fuse_mask_to_boundary: bool = True
    fuse_boundary_to_mask_conv: bool = True
    branches: tuple = BRANCHES
    use_warp: bool = True

    def __post_init__(self):
        self.branches = tuple(self.branches)
        if "seg" not in self.branches:
            raise ValueError("the seg branch is always required")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown branches {sorted(unknown)}")
        # canonical order keeps parameter slots and logs stable
        self.branches = tuple(b for b in BRANCHES if b in self.branches)
        morphology.check_kernel(self.kernel_size)
        if self.feat_channels < 1 or self.grid_size < 1:
            raise ValueError("feat_channels and grid_size must be positive")

    @property
    def target_size(self) -> int:
        return 2 * self.grid_size

    @property
    def image_size(self) -> int:
        return 2 * self.grid_size

    @property
    def squeeze_branches(self) -> tuple:
        return tuple(b for b in SQUEEZE_BRANCHES if b in self.branches)

    @property
    def has_bsm(self) -> bool:
        return len(self.branches) > 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d


def slot_layout(cfg: BSMConfig) -> dict[str, tuple[int, int, str]]:
    """Slot name -> (in_channels, out_channels, kernel) for ``cfg``."""
    c = cfg.feat_channels
    slots = {
        "enc1": (1, c, "3x3"),
        "enc2": (c, c, "3x3"),
        "enc3": (c, c, "3x3"),
    }
    if cfg.low_level_enabled:
        slots["enc_low"] = (c, c, "1x1")
    for i in range(1, 5):
        slots[f"head{i}"] = (c, c, "3x3")
    for b in cfg.squeeze_branches:
        slots[f"{b}_conv1"] = (c, c, "3x3")
        slots[f"{b}_conv2"] = (c, c, "3x3")
        slots[f"{b}_flow"] = (2 * c, 2, "3x3")
    if cfg.has_bsm and cfg.fuse_boundary_to_mask_conv:
        slots["b2m"] = (c, c, "1x1")
    for b in cfg.branches:
        slots[f"pred_{b}_deconv"] = (c, c, "deconv2x2")
        slots[f"pred_{b}_out"] = (c, 1, "1x1")
    return slots


class ModelParams(dict):
    """Named :class:`ConvSpec` slots."""

    def sfg(self, branch: str) -> SFGSpec:
        return SFGSpec(self[f"{branch}_flow"])

    def zero_grad(self) -> None:
        for spec in self.values():
            spec.zero_grad()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, s in self.items():
            out[name] = ConvSpec(s.in_channels, s.out_channels, s.kernel, s.weight.copy(), s.bias.copy())
        return out

    def num_params(self) -> int:
        return sum(s.weight.size + s.bias.size for s in self.values())

    def check(self, cfg: BSMConfig) -> None:
        layout = slot_layout(cfg)
        missing = set(layout) - set(self)
        if missing:
            raise ShapeMismatchError(f"missing parameter slots: {sorted(missing)}")
        for name, (cin, cout, kernel) in layout.items():
            s = self[name]
            if (s.in_channels, s.out_channels, s.kernel) != (cin, cout, kernel):
                raise ShapeMismatchError(
                    f"slot {name}: {(s.in_channels, s.out_channels, s.kernel)} != {(cin, cout, kernel)}"
                )


def init_params(cfg: BSMConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Kaiming init; flow convs start at zero so every warp is the identity.

    Each slot draws from its own stream keyed by (seed, slot name), so
    configs that share a slot also share its initial weights.
    """
    params = ModelParams()
    for name, (cin, cout, kernel) in slot_layout(cfg).items():
        if name.endswith("_flow"):
            params[name] = ConvSpec.zeros(cin, cout, kernel, dtype=dtype)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            params[name] = ConvSpec.kaiming(cin, cout, kernel, rng, dtype=dtype)
    return params


def _conv_relu(x: FeatureField, spec: ConvSpec) -> FeatureField:
    return relu_forward(conv_forward(x, spec))


def toy_encoder(image: FeatureField, params: ModelParams, cfg: BSMConfig):
    """Return ``(f_roi, f_roi_low)``; ``f_roi_low`` is None when disabled."""
    size = cfg.image_size
    if image.shape != (1, size, size):
        raise ShapeMismatchError(f"expected a 1x{size}x{size} image, got {image.shape}")
    e1 = _conv_relu(image, params["enc1"])
    e2 = _conv_relu(avg_pool2(e1), params["enc2"])
    f_roi = _conv_relu(e2, params["enc3"])
    f_low = None
    if cfg.low_level_enabled:
        f_low = avg_pool2(conv_forward(e1, params["enc_low"]))
    return f_roi, f_low


def _pred_head(x: FeatureField, params: ModelParams, branch: str) -> FeatureField:
    up = relu_forward(conv_forward(x, params[f"pred_{branch}_deconv"]))
    return conv_forward(up, params[f"pred_{branch}_out"])


class BSMOutput(NamedTuple):
    logits: dict          # branch -> FeatureField (1 x 2G x 2G)
    flows: dict           # squeeze branch -> FlowField
    features: dict        # named intermediate fields for inspection


def bsm_forward(f_roi: FeatureField, f_roi_low: Optional[FeatureField], params: ModelParams,
                cfg: BSMConfig) -> BSMOutput:
    c, g = cfg.feat_channels, cfg.grid_size
    if f_roi.shape != (c, g, g):
        raise ShapeMismatchError(f"f_roi shape {f_roi.shape} != {(c, g, g)}")
    if cfg.low_level_enabled and (f_roi_low is None or f_roi_low.shape != f_roi.shape):
        raise ShapeMismatchError("low-level features missing or mis-shaped")

    f_mask = f_roi
    for i in range(1, 5):
        f_mask = _conv_relu(f_mask, params[f"head{i}"])
    features = {"f_roi": f_roi, "f_mask": f_mask}
    flows = {}
    seg_feat = f_mask

    if cfg.has_bsm:
        f_sum = add(f_roi, f_roi_low) if cfg.low_level_enabled else f_roi
        squeezed = {}
        for b in cfg.squeeze_branches:
            fp = _conv_relu(_conv_relu(f_sum, params[f"{b}_conv1"]), params[f"{b}_conv2"])
            if cfg.use_warp:
                squeezed[b], flow = sfg(fp, f_roi, params.sfg(b), return_flow=True)
                flows[b] = FlowField(flow.values)
            else:
                squeezed[b] = fp
            features[f"F_{b}"] = squeezed[b]
        parts = [squeezed[b] for b in cfg.squeeze_branches] + [f_roi]
        if cfg.fuse_mask_to_boundary:
            parts.append(f_mask)
        f_boundary = add_n(parts)
        features["F_boundary"] = f_boundary
        if cfg.fuse_boundary_to_mask_conv:
            seg_feat = add(f_mask, conv_forward(f_boundary, params["b2m"]))
        heads_in = {"seg": seg_feat, "bnd": f_boundary, **squeezed}
    else:
        heads_in = {"seg": seg_feat}

    logits = {b: _pred_head(heads_in[b], params, b) for b in cfg.branches}
    return BSMOutput(logits, flows, features)


def forward(image: FeatureField, params: ModelParams, cfg: BSMConfig) -> BSMOutput:
    f_roi, f_low = toy_encoder(image, params, cfg)
    return bsm_forward(f_roi, f_low, params, cfg)


class Inference(NamedTuple):
    mask: np.ndarray
    probs: dict
    flows: dict
    features: dict


def infer(image: FeatureField, params: ModelParams, cfg: BSMConfig) -> Inference:
    """Predicted mask is ``sigmoid(seg) > 0.5`` (a logit of exactly 0 is background)."""
    out = forward(image, params, cfg)
    probs = {b: sigmoid(z.values[0]) for b, z in out.logits.items()}
    return Inference(out.logits["seg"].values[0] > 0, probs, out.flows, out.features)
