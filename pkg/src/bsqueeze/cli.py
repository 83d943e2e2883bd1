"""Command-line entry point: ``bsqueeze <command> ...``.

Exit codes: 0 ok, 2 input parse error, 3 invalid config, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments, formats, morphology, viz
from .bsm import BRANCHES, infer
from .config import ConfigError, RunConfig
from .dataio import DegeneratePolygonError, gen_dataset, load_dataset, polygon_doc_mask, save_dataset
from .numcore import FeatureField, ShapeMismatchError
from .train import load_checkpoint

log = logging.getLogger("bsqueeze")

EXIT_OK, EXIT_PARSE, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _echo(out: Path, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / experiments.CONFIG_ECHO).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


# --- commands -----------------------------------------------------------------------

def cmd_gen_gt(args) -> int:
    k = morphology.check_kernel(args.k)
    if str(args.mask).lower().endswith(".json"):
        mask = polygon_doc_mask(formats.read_polygon_json(args.mask))
    else:
        mask = formats.read_mask_pgm(args.mask)
    t = morphology.make_targets(mask, k)
    out = Path(args.out)
    _echo(out, {"command": "gen-gt", "mask": str(args.mask), "k": k})
    for name in ("gs", "gb", "gc", "ge"):
        formats.write_pgm(out / f"{name}.pgm", getattr(t, name))
    print(f"gs={int(t.gs.sum())} gb={int(t.gb.sum())} gc={int(t.gc.sum())} ge={int(t.ge.sum())} -> {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    n = args.n if args.n is not None else cfg.data.n_samples
    seed = args.seed if args.seed is not None else cfg.seed
    samples = gen_dataset(n, seed, cfg.data.config)
    out = Path(args.out)
    save_dataset(samples, out, seed, cfg.data.config)
    _echo(out, {"command": "gen-data", "n": n, "seed": seed, "data": cfg.data.config.to_dict()})
    print(f"wrote {n} samples -> {out}")
    return EXIT_OK


def _override(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        changes["optim"] = dataclasses.replace(cfg.optim, steps=args.steps)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _override(_load_config(args.config), args)
    means = experiments.run(cfg)
    print(json.dumps({k: round(means[k], 6) for k in experiments.SUMMARY_KEYS}))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model, manifest = load_checkpoint(args.ckpt)
    samples, _ = load_dataset(args.data, model.kernel_size)
    dtype = np.dtype(manifest.get("run_config", {}).get("optim", {}).get("dtype", "float64"))
    report = experiments.evaluate(params, model, samples, dtype)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    _echo(out, {"command": "eval", "ckpt": str(args.ckpt), "data": str(args.data),
                "model": model.to_dict()})
    report.write_json(out / "eval.json")
    report.write_csv(out / "eval.csv")
    print(report.table())
    return EXIT_OK


def _rows_table(rows: list, key: str) -> str:
    head = f"{key:>16} " + " ".join(f"{k:>12}" for k in experiments.SUMMARY_KEYS)
    lines = [head]
    for r in rows:
        lines.append(f"{str(r[key]):>16} " + " ".join(f"{r[k]:12.4f}" for k in experiments.SUMMARY_KEYS))
    return "\n".join(lines)


def cmd_sweep_k(args) -> int:
    for k in args.values:
        morphology.check_kernel(k)
    cfg = _override(_load_config(args.config), args)
    rows = experiments.sweep_k(cfg, args.values, args.seeds, args.out or cfg.out_dir)
    print(_rows_table(rows, "k"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    sets = [tuple(b.strip() for b in s.split(",") if b.strip()) for s in args.branches]
    for s in sets:
        unknown = set(s) - set(BRANCHES)
        if unknown or "seg" not in s:
            raise ConfigError(f"bad branch set {','.join(s)!r}: must include seg, "
                              f"choose from {','.join(BRANCHES)}")
    cfg = _override(_load_config(args.config), args)
    rows = experiments.ablate(cfg, sets, args.seeds, args.out or cfg.out_dir)
    print(_rows_table(rows, "branches"))
    return EXIT_OK


def cmd_viz(args) -> int:
    params, model, manifest = load_checkpoint(args.ckpt)
    if args.data:
        samples, _ = load_dataset(args.data, model.kernel_size)
    else:
        cfg = RunConfig.from_dict(manifest.get("run_config", {}))
        samples = experiments.build_dataset(cfg)
    if not 0 <= args.sample < len(samples):
        raise CliError(f"sample {args.sample} out of range (0..{len(samples) - 1})", EXIT_CONFIG)
    s = samples[args.sample]
    result = infer(s.image, params, model)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"viz_{args.sample:05d}"
    _echo(out, {"command": "viz", "ckpt": str(args.ckpt), "sample": args.sample,
                "scale": args.scale, "model": model.to_dict()})
    img = np.clip(s.image.values[0], 0.0, 1.0)
    formats.write_pgm(out / "image.pgm", np.round(img * 255).astype(np.uint8))
    formats.write_pgm(out / "gt.pgm", s.gs)
    formats.write_pgm(out / "pred.pgm", result.mask)
    written = ["image.pgm", "gt.pgm", "pred.pgm"]
    for b, flow in result.flows.items():
        viz.write_flow_ppm(out / f"flow_{b}.ppm", flow.values, args.scale)
        written.append(f"flow_{b}.ppm")
    feats = result.features.get("F_boundary", result.features["f_mask"])
    viz.write_pca_ppm(out / "pca.ppm", feats.values, args.scale)
    written.append("pca.ppm")
    print(f"wrote {', '.join(written)} -> {out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsqueeze", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-gt", help="write gs/gb/gc/ge PGM targets for one mask")
    g.add_argument("--mask", required=True, help="binary mask as PGM, or polygon JSON")
    g.add_argument("--k", type=int, default=morphology.INSTANCE_KERNEL, help="odd kernel size (default 5)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_gt)

    g = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    g.add_argument("--config", help="run config JSON (its data section is used)")
    g.add_argument("--n", type=int, help="number of samples (default from config)")
    g.add_argument("--seed", type=int, help="dataset seed (default from config)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("train", help="train, checkpoint and evaluate one run")
    g.add_argument("--config", help="run config JSON (defaults if omitted)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--steps", type=int, help="override optim.steps")
    g.add_argument("--out", help="override the config out_dir")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    g.add_argument("--ckpt", required=True, help="checkpoint directory")
    g.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    g.add_argument("--out", help="output directory (default: <ckpt>/../eval)")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("sweep-k", help="train the full model for each squeeze kernel size")
    g.add_argument("--values", type=_int_list, default=[1, 3, 5, 7, 9], help="kernel sizes, e.g. 1,3,5,7,9")
    g.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="seeds to average (default 0,1,2)")
    g.add_argument("--config", help="base run config JSON")
    g.add_argument("--steps", type=int, help="override optim.steps")
    g.add_argument("--out", help="output directory (default: config out_dir)")
    g.set_defaults(func=cmd_sweep_k)

    g = sub.add_parser("ablate", help="train each branch subset over several seeds")
    g.add_argument("--branches", action="append", required=True,
                   help="comma-separated branch set, repeatable (e.g. seg and seg,bnd,con,exp)")
    g.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="seeds (default 0..4)")
    g.add_argument("--config", help="base run config JSON")
    g.add_argument("--steps", type=int, help="override optim.steps")
    g.add_argument("--out", help="output directory (default: config out_dir)")
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("viz", help="write flow and feature-PCA images for one sample")
    g.add_argument("--ckpt", required=True, help="checkpoint directory")
    g.add_argument("--sample", type=int, required=True, help="sample index")
    g.add_argument("--data", help="dataset directory (default: regenerate from the run config)")
    g.add_argument("--scale", type=int, default=8, help="nearest-neighbour upscale factor")
    g.add_argument("--out", help="output directory (default: <ckpt>/../viz_<sample>)")
    g.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (formats.FormatError, DegeneratePolygonError) as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, morphology.InvalidKernelError, ShapeMismatchError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (KeyError, TypeError, ValueError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
