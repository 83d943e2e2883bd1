"""Run configuration: one JSON document for model, loss, optimizer and data.

Every field has a default, so ``{}`` is a valid config. Unknown keys at any
level are rejected. The squeeze kernel size lives under ``model`` only and
is also used to build dataset targets.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .bsm import BSMConfig
from .dataio import DataConfig
from .formats import FormatError
from .losses import LossConfig
from .morphology import InvalidKernelError
from .train import OptimConfig

SECTIONS = ("model", "loss", "optim", "data")


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    n_samples: int = 500
    path: Optional[str] = None  # load a saved dataset instead of generating
    config: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        d = self.config.to_dict()
        d.pop("kernel_size")
        return {"n_samples": self.n_samples, "path": self.path, **d}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: BSMConfig = field(default_factory=BSMConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataSettings = field(default_factory=DataSettings)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "loss": dataclasses.asdict(self.loss),
            "optim": self.optim.to_dict(),
            "data": self.data.to_dict(),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(doc, ("seed", "out_dir") + SECTIONS, "config")
        for name in SECTIONS:
            if not isinstance(doc.get(name, {}), dict):
                raise ConfigError(f"section {name!r} must be an object")
        seed = doc.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        out_dir = doc.get("out_dir", "runs/default")
        if not isinstance(out_dir, str) or not out_dir:
            raise ConfigError("out_dir must be a non-empty string")
        try:
            model = _build(BSMConfig, doc.get("model", {}), "model")
            loss = _build(LossConfig, doc.get("loss", {}), "loss")
            optim = _build(OptimConfig, doc.get("optim", {}), "optim")
            data = _build_data(doc.get("data", {}), model.kernel_size)
        except ConfigError:
            raise
        except (TypeError, ValueError, InvalidKernelError) as e:
            raise ConfigError(str(e)) from None
        if data.config.grid_size != model.grid_size:
            raise ConfigError(
                f"data.grid_size {data.config.grid_size} != model.grid_size {model.grid_size}"
            )
        return cls(seed, out_dir, model, loss, optim, data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise FormatError("config file not found", 0, p) from None
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", e.pos, p) from None
        return cls.from_dict(doc)


def _field_names(cls) -> tuple:
    return tuple(f.name for f in dataclasses.fields(cls))


def _reject_unknown(doc: dict, allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, doc: dict, where: str):
    _reject_unknown(doc, _field_names(cls), where)
    return cls(**doc)


def _build_data(doc: dict, kernel_size: int) -> DataSettings:
    data_fields = tuple(n for n in _field_names(DataConfig) if n != "kernel_size")
    _reject_unknown(doc, ("n_samples", "path") + data_fields, "data")
    doc = dict(doc)
    n = doc.pop("n_samples", 500)
    path = doc.pop("path", None)
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError("data.n_samples must be a positive integer")
    if path is not None and not isinstance(path, str):
        raise ConfigError("data.path must be a string or null")
    return DataSettings(n, path, DataConfig(kernel_size=kernel_size, **doc))
