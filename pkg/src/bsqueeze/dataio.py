"""Synthetic single-object crops: shapes, rasterization and datasets.

Coordinates inside :class:`ShapeSpec` are normalized to ``[0, 1]`` with
``x`` along columns; a pixel is inside a shape when its centre is.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import formats, morphology
from .numcore import FeatureField

SHAPE_KINDS = ("ellipse", "convex", "star", "union")


class DegeneratePolygonError(ValueError):
    pass


def _pixel_centers(height: int, width: int):
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(xs, ys)  # X, Y each (height, width)


def _grid_hw(grid) -> tuple[int, int]:
    if isinstance(grid, (tuple, list)):
        return int(grid[0]), int(grid[1])
    return int(grid), int(grid)


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize_polygon(vertices, grid) -> np.ndarray:
    """Even-odd point-in-polygon test on pixel centres.

    ``grid`` is an int (square) or ``(height, width)``.
    """
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise DegeneratePolygonError("polygon needs at least 3 (x, y) vertices")
    if abs(polygon_area(v)) < 1e-12:
        raise DegeneratePolygonError("polygon has zero area")
    h, w = _grid_hw(grid)
    px, py = _pixel_centers(h, w)
    inside = np.zeros((h, w), dtype=bool)
    x1, y1 = v[-1]
    for x2, y2 in v:
        # half-open on y so shared vertices are counted once
        crosses = (y1 > py) != (y2 > py)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
        x1, y1 = x2, y2
    return inside


def rasterize_ellipse(center, radii, angle: float, grid) -> np.ndarray:
    h, w = _grid_hw(grid)
    px, py = _pixel_centers(h, w)
    dx, dy = px - center[0], py - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / radii[0]
    v = (-sa * dx + ca * dy) / radii[1]
    return u * u + v * v <= 1.0


@dataclass
class ShapeSpec:
    kind: str
    params: dict
    fg_mean: float = 0.65
    bg_mean: float = 0.35
    noise_sigma: float = 0.2
    distractor: Optional[dict] = None

    def mask(self, grid) -> np.ndarray:
        return _shape_mask(self.kind, self.params, grid)


def _shape_mask(kind: str, params: dict, grid) -> np.ndarray:
    if kind == "ellipse":
        return rasterize_ellipse(params["center"], params["radii"], params["angle"], grid)
    if kind in ("convex", "star"):
        return rasterize_polygon(params["vertices"], grid)
    if kind == "union":
        a, b = params["parts"]
        return _shape_mask(a["kind"], a["params"], grid) | _shape_mask(b["kind"], b["params"], grid)
    raise ValueError(f"unknown shape kind {kind!r}")


@dataclass
class DataConfig:
    grid_size: int = 14               # feature grid; images/targets are 2x
    kernel_size: int = morphology.INSTANCE_KERNEL
    kinds: tuple = SHAPE_KINDS
    fg_mean: float = 0.65
    bg_mean: float = 0.35
    contrast_jitter: float = 0.1
    noise_sigma: float = 0.35
    distractor_prob: float = 0.5
    train_fraction: float = 0.8

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        bad = set(self.kinds) - set(SHAPE_KINDS)
        if bad or not self.kinds:
            raise ValueError(f"bad shape kinds {sorted(bad) or '(empty)'}")
        morphology.check_kernel(self.kernel_size)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.distractor_prob <= 1:
            raise ValueError("distractor_prob must be in [0, 1]")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")

    @property
    def image_size(self) -> int:
        return 2 * self.grid_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Sample(NamedTuple):
    image: FeatureField
    gs: np.ndarray
    gb: np.ndarray
    gc: np.ndarray
    ge: np.ndarray

    def targets(self) -> dict:
        return {"seg": self.gs, "bnd": self.gb, "con": self.gc, "exp": self.ge}


def _random_ellipse(rng) -> dict:
    return {
        "center": rng.uniform(0.4, 0.6, 2).tolist(),
        "radii": rng.uniform(0.22, 0.42, 2).tolist(),
        "angle": float(rng.uniform(0, np.pi)),
    }


def _random_convex(rng) -> dict:
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(0.3, 0.44)
    c = rng.uniform(0.42, 0.58, 2)
    rx, ry = r * rng.uniform(0.7, 1.0, 2)
    verts = np.stack([c[0] + rx * np.cos(angles), c[1] + ry * np.sin(angles)], axis=1)
    return {"vertices": verts.tolist()}


def _random_star(rng) -> dict:
    n = int(rng.integers(4, 7))
    c = rng.uniform(0.44, 0.56, 2)
    r_out = rng.uniform(0.36, 0.46)
    r_in = r_out * rng.uniform(0.35, 0.65)
    phase = rng.uniform(0, 2 * np.pi)
    angles = phase + np.arange(2 * n) * np.pi / n
    radii = np.where(np.arange(2 * n) % 2 == 0, r_out, r_in)
    verts = np.stack([c[0] + radii * np.cos(angles), c[1] + radii * np.sin(angles)], axis=1)
    return {"vertices": verts.tolist()}


def _random_part(rng, kinds=("ellipse", "convex")) -> dict:
    kind = kinds[int(rng.integers(len(kinds)))]
    params = _random_ellipse(rng) if kind == "ellipse" else _random_convex(rng)
    if kind == "ellipse":
        params["radii"] = (np.asarray(params["radii"]) * 0.75).tolist()
    else:
        c = np.mean(params["vertices"], axis=0)
        params["vertices"] = (c + 0.75 * (np.asarray(params["vertices"]) - c)).tolist()
    return {"kind": kind, "params": params}


def random_shape(rng: np.random.Generator, cfg: DataConfig) -> ShapeSpec:
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    if kind == "ellipse":
        params = _random_ellipse(rng)
    elif kind == "convex":
        params = _random_convex(rng)
    elif kind == "star":
        params = _random_star(rng)
    else:
        a, b = _random_part(rng), _random_part(rng)
        theta = rng.uniform(0, 2 * np.pi)
        shift = rng.uniform(0.08, 0.18) * np.array([np.cos(theta), np.sin(theta)])
        for part, sign in ((a, -1), (b, 1)):
            p = part["params"]
            if part["kind"] == "ellipse":
                p["center"] = (np.asarray(p["center"]) + sign * shift).tolist()
            else:
                p["vertices"] = (np.asarray(p["vertices"]) + sign * shift).tolist()
        params = {"parts": [a, b]}
    jitter = rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter, 2)
    distractor = None
    if rng.random() < cfg.distractor_prob:
        distractor = {
            "center": rng.uniform(0.0, 1.0, 2).tolist(),
            "radii": rng.uniform(0.08, 0.2, 2).tolist(),
            "angle": float(rng.uniform(0, np.pi)),
        }
    return ShapeSpec(kind, params, cfg.fg_mean + jitter[0], cfg.bg_mean + jitter[1],
                     cfg.noise_sigma, distractor)


def render(spec: ShapeSpec, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, mask)``; the distractor is background in the mask."""
    mask = spec.mask(size)
    img = np.where(mask, spec.fg_mean, spec.bg_mean).astype(np.float64)
    if spec.distractor is not None:
        d = spec.distractor
        patch = rasterize_ellipse(d["center"], d["radii"], d["angle"], size) & ~mask
        img[patch] = spec.fg_mean
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return img, mask


def make_sample(image: np.ndarray, mask: np.ndarray, k: int) -> Sample:
    t = morphology.make_targets(mask, k)
    return Sample(FeatureField(np.asarray(image, dtype=np.float64)[None]), t.gs, t.gb, t.gc, t.ge)


def gen_dataset(n: int, seed: int, cfg: Optional[DataConfig] = None) -> list[Sample]:
    """``n`` samples, a pure function of ``(seed, cfg)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or DataConfig()
    size = cfg.image_size
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            spec = random_shape(rng, cfg)
            img, mask = render(spec, size, rng)
            if mask.any() and not mask.all():
                break
        samples.append(make_sample(img, mask, cfg.kernel_size))
    return samples


def split(samples: list, train_fraction: float = 0.8) -> tuple[list, list]:
    """Deterministic split by index: the first ``train_fraction`` train."""
    cut = int(round(len(samples) * train_fraction))
    return samples[:cut], samples[cut:]


def retarget(samples: list[Sample], k: int) -> list[Sample]:
    """Rebuild derived targets with a different kernel size."""
    return [make_sample(s.image.values[0], s.gs, k) for s in samples]


# --- on-disk dataset ------------------------------------------------------------

def save_dataset(samples: list[Sample], out_dir, seed: int, cfg: DataConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(samples):
        img_name, mask_name = f"{i:05d}_image.bsqt", f"{i:05d}_mask.pgm"
        formats.write_bsqt(out / img_name, s.image.values)
        formats.write_pgm(out / mask_name, s.gs)
        files.append({"image": img_name, "mask": mask_name})
    manifest = {"seed": seed, "config": cfg.to_dict(), "config_hash": cfg.digest(),
                "count": len(samples), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(data_dir, k: Optional[int] = None) -> tuple[list[Sample], dict]:
    d = Path(data_dir)
    manifest_path = d / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise formats.FormatError("dataset manifest.json not found", 0, manifest_path) from None
    except json.JSONDecodeError as e:
        raise formats.FormatError(f"invalid JSON: {e.msg}", e.pos, manifest_path) from None
    if k is None:
        k = manifest.get("config", {}).get("kernel_size", morphology.INSTANCE_KERNEL)
    samples = []
    for entry in manifest["files"]:
        image = formats.read_bsqt(d / entry["image"])
        mask = formats.read_mask_pgm(d / entry["mask"])
        samples.append(make_sample(image[0], mask, k))
    return samples, manifest


def polygon_doc_mask(doc: dict) -> np.ndarray:
    """Union of all polygons in a polygon-JSON document (pixel coordinates)."""
    h, w = doc["height"], doc["width"]
    mask = np.zeros((h, w), dtype=bool)
    for obj in doc["objects"]:
        verts = np.asarray(obj["polygon"], dtype=float) / np.array([w, h])
        mask |= rasterize_polygon(verts, (h, w))
    return mask
