"""Train/evaluate runs, the kernel-size sweep and the branch ablation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bsm import BSMConfig, ModelParams, infer
from .config import RunConfig
from .dataio import Sample, gen_dataset, load_dataset, retarget, split
from .metrics import EvalReport
from .numcore import FeatureField
from .train import save_checkpoint, train, write_log_csv

log = logging.getLogger(__name__)

CONFIG_ECHO = "config.json"
SUMMARY_KEYS = ("mask_iou", "boundary_iou", "f1px", "f2px", "f3px", "f5px")


def worker_count() -> int:
    """Worker cap from ``BSQ_THREADS`` (default 1)."""
    raw = os.environ.get("BSQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_dataset(cfg: RunConfig) -> list[Sample]:
    if cfg.data.path:
        samples, _ = load_dataset(cfg.data.path, cfg.model.kernel_size)
        return samples
    return gen_dataset(cfg.data.n_samples, cfg.seed, cfg.data.config)


def evaluate(params: ModelParams, model: BSMConfig, samples: Sequence[Sample],
             dtype=np.float64) -> EvalReport:
    """Metrics of the seg prediction against ``gs``; parallel across samples."""

    def predict(s):
        image = FeatureField(s.image.values.astype(dtype, copy=False))
        return infer(image, params, model).mask

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            preds = list(pool.map(predict, samples))
    else:
        preds = [predict(s) for s in samples]
    report = EvalReport()
    for i, (pred, s) in enumerate(zip(preds, samples)):
        report.add(pred, s.gs, i)
    return report


def run(cfg: RunConfig, out_dir: Optional[Path] = None,
        samples: Optional[list] = None) -> dict:
    """Train on the train split, evaluate on the held-out split, write artifacts.

    Writes the config echo, a checkpoint, the loss log CSV and the eval
    report under ``out_dir`` (default ``cfg.out_dir``). Returns the
    aggregate metrics.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_ECHO)
    if samples is None:
        samples = build_dataset(cfg)
    train_set, val_set = split(samples, cfg.data.config.train_fraction)
    if not val_set:
        val_set = train_set
    result = train(train_set, cfg.model, cfg.loss, cfg.optim, cfg.seed)
    # the output location is left out so checkpoints are relocatable
    run_doc = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    save_checkpoint(out / "checkpoint", result.params, cfg.model, cfg.seed, {"run_config": run_doc})
    write_log_csv(out / "train_log.csv", result.log)
    report = evaluate(result.params, cfg.model, val_set, np.dtype(cfg.optim.dtype))
    report.write_json(out / "eval.json")
    report.write_csv(out / "eval.csv")
    means = report.means()
    log.info("%s: %s", out, {k: round(means[k], 4) for k in SUMMARY_KEYS})
    return means


def _with(cfg: RunConfig, seed: int, out_dir: str, **model_changes) -> RunConfig:
    model = dataclasses.replace(cfg.model, **model_changes)
    data = dataclasses.replace(cfg.data, config=dataclasses.replace(
        cfg.data.config, kernel_size=model.kernel_size))
    return dataclasses.replace(cfg, seed=seed, out_dir=out_dir, model=model, data=data)


def _mean_rows(per_seed: list[dict]) -> dict:
    return {k: float(np.mean([m[k] for m in per_seed])) for k in SUMMARY_KEYS}


def _write_rows(path: Path, key: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([key, "seeds"] + list(SUMMARY_KEYS))
        for r in rows:
            w.writerow([r[key], r["seeds"]] + [repr(r[k]) for k in SUMMARY_KEYS])


def sweep_k(cfg: RunConfig, values: Sequence[int], seeds: Sequence[int], out_dir) -> list[dict]:
    """One row per kernel size: seed-averaged held-out metrics of the full model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_ECHO)
    rows = []
    datasets = {seed: None for seed in seeds}
    for k in values:
        per_seed = []
        for seed in seeds:
            run_cfg = _with(cfg, seed, str(out / f"k{k}" / f"seed{seed}"), kernel_size=k)
            if datasets[seed] is None:
                datasets[seed] = build_dataset(run_cfg)
            samples = retarget(datasets[seed], k)
            per_seed.append(run(run_cfg, samples=samples))
        rows.append({"k": k, "seeds": len(seeds), **_mean_rows(per_seed)})
    _write_rows(out / "sweep_k.csv", "k", rows)
    (out / "sweep_k.json").write_text(json.dumps(rows, indent=1))
    return rows


def ablate(cfg: RunConfig, branch_sets: Sequence[Sequence[str]], seeds: Sequence[int],
           out_dir) -> list[dict]:
    """One row per branch subset: seed-averaged held-out metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_ECHO)
    rows = []
    datasets = {}
    for branches in branch_sets:
        name = ",".join(BSMConfig(branches=branches).branches)
        per_seed = []
        for seed in seeds:
            run_cfg = _with(cfg, seed, str(out / name.replace(",", "+") / f"seed{seed}"),
                            branches=tuple(branches))
            if seed not in datasets:
                datasets[seed] = build_dataset(run_cfg)
            per_seed.append(run(run_cfg, samples=datasets[seed]))
        rows.append({"branches": name, "seeds": len(seeds), **_mean_rows(per_seed),
                     "per_seed_f2px": [m["f2px"] for m in per_seed]})
    _write_rows(out / "ablation.csv", "branches", rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    return rows
