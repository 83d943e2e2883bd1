"""Mask IoU, tolerance boundary F-score and band boundary IoU.

Tolerances are Chebyshev distances in pixels, realised as a
``(2 tol + 1)`` square dilation of the reference contour. Boundary IoU
bands follow the outer contour only. Empty-vs-empty comparisons score 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .morphology import as_mask, boundary_target, dilate, erode

DEFAULT_TOLERANCES = (1, 2, 3, 5)
DEFAULT_BAND = 1


def _pair(pred, gt):
    p, g = as_mask(pred), as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def mask_iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def contour(mask) -> np.ndarray:
    return boundary_target(mask)


def boundary_precision_recall(pred, gt, tolerance_px: int) -> tuple[float, float]:
    if tolerance_px < 1:
        raise ValueError("tolerance must be >= 1")
    p, g = _pair(pred, gt)
    pc, gc = contour(p), contour(g)
    npc, ngc = np.count_nonzero(pc), np.count_nonzero(gc)
    k = 2 * tolerance_px + 1
    precision = np.count_nonzero(pc & dilate(gc, k)) / npc if npc else 0.0
    recall = np.count_nonzero(gc & dilate(pc, k)) / ngc if ngc else 0.0
    return precision, recall


def boundary_f_score(pred, gt, tolerance_px: int) -> float:
    if tolerance_px < 1:
        raise ValueError("tolerance must be >= 1")
    p, g = _pair(pred, gt)
    if not contour(p).any() and not contour(g).any():
        return 1.0
    precision, recall = boundary_precision_recall(p, g, tolerance_px)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def band(mask, d: int) -> np.ndarray:
    """Object pixels within Chebyshev distance ``d`` of the outer contour.

    Holes are filled before eroding, so errors strictly inside the object
    (including holes deeper than ``d``) do not enter the band.
    """
    m = as_mask(mask)
    return m & ~erode(ndimage.binary_fill_holes(m), 2 * d + 1)


def boundary_iou(pred, gt, d: int = DEFAULT_BAND) -> float:
    if d < 1:
        raise ValueError("band width must be >= 1")
    p, g = _pair(pred, gt)
    return mask_iou(band(p, d), band(g, d))


@dataclass
class EvalReport:
    tolerances: tuple = DEFAULT_TOLERANCES
    band: int = DEFAULT_BAND
    records: list = field(default_factory=list)

    def add(self, pred, gt, sample_id=None) -> dict:
        rec = {
            "id": len(self.records) if sample_id is None else sample_id,
            "mask_iou": mask_iou(pred, gt),
            "f_scores": {int(t): boundary_f_score(pred, gt, t) for t in self.tolerances},
            "boundary_iou": boundary_iou(pred, gt, self.band),
        }
        self.records.append(rec)
        return rec

    def means(self) -> dict:
        n = len(self.records)
        if n == 0:
            return {"count": 0}
        out = {
            "count": n,
            "mask_iou": float(np.mean([r["mask_iou"] for r in self.records])),
            "boundary_iou": float(np.mean([r["boundary_iou"] for r in self.records])),
        }
        for t in self.tolerances:
            out[f"f{t}px"] = float(np.mean([r["f_scores"][int(t)] for r in self.records]))
        return out

    def to_dict(self) -> dict:
        return {
            "tolerances": list(self.tolerances),
            "band": self.band,
            "note": "boundary_iou is a mask-level band IoU; detection-level boundary AP is not computed",
            "aggregate": self.means(),
            "samples": self.records,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_csv(self, path) -> None:
        cols = ["id", "mask_iou", "boundary_iou"] + [f"f{t}px" for t in self.tolerances]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for r in self.records:
                w.writerow([r["id"], repr(r["mask_iou"]), repr(r["boundary_iou"])]
                           + [repr(r["f_scores"][int(t)]) for t in self.tolerances])

    def table(self) -> str:
        m = self.means()
        heads = ["mIoU", "bIoU"] + [f"F1({t}px)" for t in sorted(self.tolerances, reverse=True)]
        vals = [m.get("mask_iou", float("nan")), m.get("boundary_iou", float("nan"))]
        vals += [m.get(f"f{t}px", float("nan")) for t in sorted(self.tolerances, reverse=True)]
        line1 = " | ".join(f"{h:>9}" for h in heads)
        line2 = " | ".join(f"{100 * v:9.2f}" for v in vals)
        return f"{line1}\n{'-' * len(line1)}\n{line2}  (n={m.get('count', 0)})"


def evaluate_pairs(pairs: Iterable[tuple], tolerances: Sequence[int] = DEFAULT_TOLERANCES,
                   band_width: int = DEFAULT_BAND) -> EvalReport:
    report = EvalReport(tuple(tolerances), band_width)
    for pred, gt in pairs:
        report.add(pred, gt)
    return report
