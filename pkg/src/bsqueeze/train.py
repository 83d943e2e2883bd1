"""SGD training loop, step-decay schedule and BSQT checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .bsm import BSMConfig, ModelParams, forward, init_params
from .dataio import Sample
from .losses import LossConfig, mask_loss
from .numcore import ConvSpec, FeatureField, Tape

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_seg", "L_bnd", "L_con", "L_exp", "total")
_BRANCH_COL = {"seg": "L_seg", "bnd": "L_bnd", "con": "L_con", "exp": "L_exp"}


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 0.02
    reference_batch: int = 16
    batch_size: int = 8
    steps: int = 1000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_points: tuple = (2 / 3, 8 / 9)
    decay_factor: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        self.decay_points = tuple(self.decay_points)
        if self.batch_size < 1 or self.reference_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / self.reference_batch

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for frac in self.decay_points:
            if step >= int(round(frac * self.steps)):
                lr *= self.decay_factor
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d


class SGD:
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, params: ModelParams, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: (np.zeros_like(s.weight), np.zeros_like(s.bias)) for name, s in params.items()
        }

    def step(self, lr: float) -> None:
        for name, s in self.params.items():
            vw, vb = self.velocity[name]
            gw = s.grad_weight if s.grad_weight is not None else np.zeros_like(s.weight)
            gb = s.grad_bias if s.grad_bias is not None else np.zeros_like(s.bias)
            vw *= self.momentum
            vw += gw + self.weight_decay * s.weight
            vb *= self.momentum
            vb += gb + self.weight_decay * s.bias
            if lr:
                s.weight -= lr * vw
                s.bias -= lr * vb


def _accumulate_step(batch, params, cfg, loss_cfg, dtype):
    sums = {}
    for s in batch:
        image = FeatureField(s.image.values.astype(dtype, copy=False))
        with Tape() as tape:
            out = forward(image, params, cfg)
            total, parts = mask_loss(out.logits, s.targets(), loss_cfg, cfg.branches)
        if not math.isfinite(total.value):
            raise DivergenceError(f"non-finite loss {total.value}")
        tape.backward(total)
        parts["total"] = total.value
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v
    n = len(batch)
    for spec in params.values():
        if spec.grad_weight is not None:
            spec.grad_weight /= n
            spec.grad_bias /= n
    return {k: v / n for k, v in sums.items()}


@dataclass
class TrainResult:
    params: ModelParams
    log: list


def train(dataset: Sequence[Sample], cfg: BSMConfig, loss_cfg: Optional[LossConfig] = None,
          optim: Optional[OptimConfig] = None, seed: int = 0,
          params: Optional[ModelParams] = None, log_every: int = 0) -> TrainResult:
    """Minibatch SGD over ``dataset``; deterministic for a given seed."""
    if not dataset:
        raise ValueError("dataset is empty")
    loss_cfg = loss_cfg or LossConfig()
    optim = optim or OptimConfig()
    dtype = np.dtype(optim.dtype)
    if params is None:
        params = init_params(cfg, seed, dtype=dtype)
    params.check(cfg)
    opt = SGD(params, optim.momentum, optim.weight_decay)
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(len(dataset))
    cursor = 0
    history = []
    for step in range(optim.steps):
        batch = []
        for _ in range(min(optim.batch_size, len(dataset))):
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            batch.append(dataset[order[cursor]])
            cursor += 1
        params.zero_grad()
        parts = _accumulate_step(batch, params, cfg, loss_cfg, dtype)
        lr = optim.lr_at(step)
        opt.step(lr)
        for spec in params.values():
            if not (np.all(np.isfinite(spec.weight)) and np.all(np.isfinite(spec.bias))):
                raise DivergenceError(f"non-finite parameters after step {step}")
        row = {"step": step, **{_BRANCH_COL[b]: parts.get(b, float("nan")) for b in _BRANCH_COL},
               "total": parts["total"], "lr": lr}
        history.append(row)
        if log_every and (step % log_every == 0 or step == optim.steps - 1):
            log.info("step %d lr %.4g total %.4f", step, lr, parts["total"])
    params.zero_grad()
    return TrainResult(params, history)


def write_log_csv(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(ckpt_dir, params: ModelParams, cfg: BSMConfig, seed: int,
                    extra: Optional[dict] = None) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    slots = {}
    for name in sorted(params):
        s = params[name]
        wf, bf = f"{name}.weight.bsqt", f"{name}.bias.bsqt"
        formats.write_bsqt(d / wf, s.weight)
        formats.write_bsqt(d / bf, s.bias)
        slots[name] = {
            "kernel": s.kernel, "in_channels": s.in_channels, "out_channels": s.out_channels,
            "weight": wf, "bias": bf,
            "weight_shape": list(s.weight.shape), "bias_shape": list(s.bias.shape),
        }
    manifest = {"format": "bsqt-checkpoint/1", "seed": seed, "model": cfg.to_dict(), "slots": slots}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, BSMConfig, dict]:
    d = Path(ckpt_dir)
    path = d / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise formats.FormatError("checkpoint manifest.json not found", 0, path) from None
    except json.JSONDecodeError as e:
        raise formats.FormatError(f"invalid JSON: {e.msg}", e.pos, path) from None
    cfg = BSMConfig(**manifest["model"])
    params = ModelParams()
    for name, slot in manifest["slots"].items():
        params[name] = ConvSpec(slot["in_channels"], slot["out_channels"], slot["kernel"],
                                formats.read_bsqt(d / slot["weight"]).copy(),
                                formats.read_bsqt(d / slot["bias"]).copy())
    params.check(cfg)
    return params, cfg, manifest
