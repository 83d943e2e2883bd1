"""BCE, class-balanced BCE and Dice on logit fields, plus the branch sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .numcore import FeatureField, Scalar, ShapeMismatchError, _record, scalar_add, scalar_scale, sigmoid

BRANCHES = ("seg", "bnd", "con", "exp")
LOSS_KINDS = ("bce", "wbce", "dice")


class MissingBranchError(KeyError):
    pass


def _default_combo() -> dict:
    return {"seg": ["bce"], "bnd": ["bce", "dice"], "con": ["dice"], "exp": ["dice"]}


@dataclass
class LossConfig:
    dice_smooth: float = 1.0
    pos_weight_mode: str = "auto"  # "auto" balances per sample; "fixed" uses pos_weight
    pos_weight: float = 1.0
    combo: dict = field(default_factory=_default_combo)
    weights: dict = field(default_factory=dict)  # optional per-branch scale, default 1

    def __post_init__(self):
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be > 0")
        if self.pos_weight_mode not in ("auto", "fixed"):
            raise ValueError(f"pos_weight_mode must be 'auto' or 'fixed', got {self.pos_weight_mode!r}")
        for branch, kinds in self.combo.items():
            if branch not in BRANCHES:
                raise ValueError(f"unknown branch {branch!r}")
            if not kinds or any(k not in LOSS_KINDS for k in kinds):
                raise ValueError(f"bad loss list for {branch}: {kinds!r}")
        for branch in self.weights:
            if branch not in BRANCHES:
                raise ValueError(f"unknown branch {branch!r} in weights")


def _prepare(logits: FeatureField, target) -> tuple[np.ndarray, np.ndarray]:
    z = logits.values
    t = np.asarray(target)
    if t.ndim == 2:
        t = t[None]
    if t.shape != z.shape:
        raise ShapeMismatchError(f"logits {z.shape} vs target {t.shape}")
    return z, t.astype(z.dtype)


def _weighted_bce(logits: FeatureField, t: np.ndarray, z: np.ndarray, pos_w: float) -> Scalar:
    n = z.size
    # -[w t log s(z) + (1-t) log(1 - s(z))], stable form
    softplus_neg = np.logaddexp(0.0, -z)  # -log s(z)
    softplus_pos = np.logaddexp(0.0, z)   # -log(1 - s(z))
    per = pos_w * t * softplus_neg + (1.0 - t) * softplus_pos
    result = Scalar(per.sum() / n)

    def _backward():
        p = sigmoid(z)
        g = (pos_w * t * (p - 1.0) + (1.0 - t) * p) / n
        logits._accumulate(g * result.grad)

    _record((result,), _backward)
    return result


def bce(logits: FeatureField, target) -> Scalar:
    """Pixel-mean binary cross-entropy on logits."""
    z, t = _prepare(logits, target)
    return _weighted_bce(logits, t, z, 1.0)


def weighted_bce(logits: FeatureField, target, pos_weight: Optional[float] = None) -> Scalar:
    """BCE with the positive term scaled by #neg/#pos (or a fixed weight).

    Falls back to plain BCE when the target has no positives.
    """
    z, t = _prepare(logits, target)
    if pos_weight is None:
        npos = float(t.sum())
        pos_weight = (t.size - npos) / npos if npos > 0 else 1.0
    return _weighted_bce(logits, t, z, pos_weight)


def dice_loss(logits: FeatureField, target, smooth: float = 1.0) -> Scalar:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` with ``p = sigmoid(z)``."""
    if not smooth > 0:
        raise ValueError("smooth must be > 0")
    z, t = _prepare(logits, target)
    p = sigmoid(z)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + smooth
    num = 2.0 * inter + smooth
    result = Scalar(1.0 - num / denom)

    def _backward():
        dp = -(2.0 * t * denom - num) / denom**2
        logits._accumulate(dp * p * (1.0 - p) * result.grad)

    _record((result,), _backward)
    return result


def branch_loss(kinds, logits: FeatureField, target, cfg: LossConfig) -> Scalar:
    terms = []
    for kind in kinds:
        if kind == "bce":
            terms.append(bce(logits, target))
        elif kind == "wbce":
            pw = None if cfg.pos_weight_mode == "auto" else cfg.pos_weight
            terms.append(weighted_bce(logits, target, pw))
        else:
            terms.append(dice_loss(logits, target, cfg.dice_smooth))
    return terms[0] if len(terms) == 1 else scalar_add(*terms)


def mask_loss(preds: Mapping[str, FeatureField], targets: Mapping[str, np.ndarray],
              cfg: LossConfig, branches=BRANCHES) -> tuple[Scalar, dict]:
    """Unweighted (unless overridden) sum of the enabled branch losses.

    Returns the total and a ``{branch: value}`` breakdown.
    """
    terms = []
    breakdown = {}
    for branch in branches:
        if branch not in preds:
            raise MissingBranchError(f"prediction for branch {branch!r} is missing")
        if branch not in targets:
            raise MissingBranchError(f"target for branch {branch!r} is missing")
        if branch not in cfg.combo:
            raise MissingBranchError(f"no loss configured for branch {branch!r}")
        term = branch_loss(cfg.combo[branch], preds[branch], targets[branch], cfg)
        scale = cfg.weights.get(branch, 1.0)
        if scale != 1.0:
            term = scalar_scale(term, scale)
        terms.append(term)
        breakdown[branch] = term.value
    if not terms:
        raise MissingBranchError("no branches enabled")
    total = terms[0] if len(terms) == 1 else scalar_add(*terms)
    return total, breakdown
