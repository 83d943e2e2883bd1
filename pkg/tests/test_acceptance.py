"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are repeated in the pytest
terminal summary (see conftest.py). Run alone with
``python3 -m pytest tests/test_acceptance.py -v``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from bsqueeze import experiments, metrics, morphology
from bsqueeze import numcore as nc
from bsqueeze.bsm import BSMConfig, forward, init_params
from bsqueeze.config import RunConfig
from bsqueeze.dataio import gen_dataset
from bsqueeze.gradcheck import numeric_grad, relative_error, sample_indices
from bsqueeze import losses as L
from bsqueeze.numcore import ConvSpec, FeatureField, Tape, backward
from bsqueeze.train import OptimConfig, train
from bsqueeze.warp import FlowField, bilinear_warp
from oracles import (boundary_iou_bruteforce, f_score_bruteforce, laplacian_flags, random_masks,
                     window_max, window_min)

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.json"
RESULTS = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def corpus():
    return random_masks(np.random.default_rng(2024), 1000, max_size=16)


# --- 1. gradients ---------------------------------------------------------------------

def _layer_errors(build, inputs, specs, rng, step=1e-6):
    probe = rng.standard_normal(build().shape)

    def value():
        return nc.field_dot(build(), probe).value

    for f in inputs:
        f.grad = None
    for s in specs:
        s.zero_grad()
    with Tape() as tape:
        loss = nc.field_dot(build(), probe)
    tape.backward(loss)
    errs = [relative_error(f.grad, numeric_grad(value, f.values, step)) for f in inputs]
    for s in specs:
        errs.append(relative_error(s.grad_weight, numeric_grad(value, s.weight, step)))
        errs.append(relative_error(s.grad_bias, numeric_grad(value, s.bias, step)))
    return max(errs)


def _loss_error(fn, rng):
    z = FeatureField(rng.normal(0, 2, (1, 6, 6)))
    t = (rng.random((6, 6)) < 0.4).astype(float)
    with Tape() as tape:
        out = fn(z, t)
    backward(out, tape)
    return relative_error(z.grad, numeric_grad(lambda: float(fn(z, t).value), z.values, 1e-6))


def _full_graph_error(rng):
    cfg = BSMConfig(feat_channels=8, grid_size=8)
    params = init_params(cfg, 0)
    for b in cfg.squeeze_branches:
        params[f"{b}_flow"].weight[...] = rng.normal(0, 0.05, params[f"{b}_flow"].weight.shape)
        params[f"{b}_flow"].bias[...] = rng.uniform(0.2, 0.4, 2)
    yy, xx = np.mgrid[0:16, 0:16]
    mask = (yy - 7.3) ** 2 / 30 + (xx - 8.1) ** 2 / 18 <= 1
    t = morphology.make_targets(mask, 5)
    targets = {"seg": t.gs, "bnd": t.gb, "con": t.gc, "exp": t.ge}
    image = FeatureField((np.where(mask, 0.7, 0.3) + rng.normal(0, 0.05, mask.shape))[None])
    lcfg = L.LossConfig()

    def value():
        return float(L.mask_loss(forward(image, params, cfg).logits, targets, lcfg)[0].value)

    params.zero_grad()
    with Tape() as tape:
        total, _ = L.mask_loss(forward(image, params, cfg).logits, targets, lcfg)
    backward(total, tape)
    worst = 0.0
    for name in sorted(params):
        w = params[name].weight
        idx = sample_indices(w.size, 16, rng)
        worst = max(worst, relative_error(params[name].grad_weight, numeric_grad(value, w, 1e-6, idx)))
    return worst


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {}
    for kernel in ("1x1", "3x3", "deconv2x2"):
        x = FeatureField(rng.standard_normal((3, 6, 6)))
        spec = ConvSpec.kaiming(3, 2, kernel, rng)
        spec.bias = rng.standard_normal(2)
        errs[kernel] = _layer_errors(lambda: nc.conv_forward(x, spec), [x], [spec], rng)
    vals = rng.standard_normal((3, 6, 6))
    vals[np.abs(vals) < 1e-2] = 0.5
    x = FeatureField(vals)
    errs["relu"] = _layer_errors(lambda: nc.relu_forward(x), [x], [], rng)

    x = FeatureField(rng.normal(size=(2, 5, 6)))
    flow = FlowField(rng.integers(-2, 2, (2, 5, 6)) + rng.uniform(0.2, 0.8, (2, 5, 6)))
    probe = rng.normal(size=(2, 5, 6))
    with Tape() as tape:
        out = nc.field_dot(bilinear_warp(x, flow), probe)
    backward(out, tape)

    def warp_value():
        return float(nc.field_dot(bilinear_warp(x, flow), probe).value)

    errs["warp_input"] = relative_error(x.grad, numeric_grad(warp_value, x.values, 1e-6))
    errs["warp_flow"] = relative_error(flow.grad, numeric_grad(warp_value, flow.values, 1e-6))
    errs["bce"] = _loss_error(L.bce, rng)
    errs["weighted_bce"] = _loss_error(L.weighted_bce, rng)
    errs["dice"] = _loss_error(lambda z, t: L.dice_loss(z, t, 1.0), rng)
    full = _full_graph_error(rng)
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-4 and full < 1e-3 and elapsed < 120
    report(1, ok, f"max op rel err {worst:.2e} (<1e-4), full graph {full:.2e} (<1e-3), {elapsed:.1f}s (<120s)")


# --- 2/3. morphology ---------------------------------------------------------------

def test_criterion_2_morphology_oracle(corpus):
    start = time.perf_counter()
    mismatches = 0
    for m in corpus:
        if not np.array_equal(morphology.boundary_target(m), laplacian_flags(m)):
            mismatches += 1
        for k in (1, 3, 5, 7):
            dil, ero = window_max(m, k), window_min(m, k)
            gc, ge = morphology.squeeze_targets(m, k)
            if not (np.array_equal(morphology.dilate(m, k), dil)
                    and np.array_equal(morphology.erode(m, k), ero)
                    and np.array_equal(gc, dil & ~m) and np.array_equal(ge, m & ~ero)):
                mismatches += 1
    elapsed = time.perf_counter() - start
    report(2, mismatches == 0 and elapsed < 60,
           f"{mismatches} mismatches over {len(corpus)} masks x k in 1,3,5,7, {elapsed:.1f}s (<60s)")


def test_criterion_3_target_invariants(corpus):
    violations = 0
    for m in corpus:
        prev = None
        for k in (1, 3, 5, 7):
            gc, ge = morphology.squeeze_targets(m, k)
            violations += int((gc & ge).any()) + int((ge & ~m).any()) + int((gc & m).any())
            violations += int(not np.array_equal(morphology.erode(m, k), ~morphology.dilate(~m, k)))
            if prev is not None:
                violations += int((prev[0] & ~gc).any()) + int((prev[1] & ~ge).any())
            prev = (gc, ge)
    report(3, violations == 0, f"{violations} violations (disjoint, subset, monotone in k, duality)")


# --- 4. warp identity ----------------------------------------------------------------

def test_criterion_4_warp_identity():
    rng = np.random.default_rng(4)
    x = FeatureField(rng.normal(size=(5, 9, 7)))
    same = np.array_equal(bilinear_warp(x, FlowField(np.zeros((2, 9, 7)))).values, x.values)
    cfg = BSMConfig()
    params = init_params(cfg, 0)
    image = FeatureField(rng.normal(0.5, 0.2, (1, cfg.image_size, cfg.image_size)))
    warped = forward(image, params, cfg)
    plain = forward(image, params, BSMConfig(use_warp=False))
    net_same = all(np.array_equal(warped.logits[b].values, plain.logits[b].values) for b in cfg.branches)
    report(4, same and net_same, f"zero-flow warp bitwise={same}, zero-init SFG vs no-warp bitwise={net_same}")


# --- 5. single-sample overfit ----------------------------------------------------------

def test_criterion_5_single_sample_overfit():
    start = time.perf_counter()
    sample = gen_dataset(1, 0)
    result = train(sample, BSMConfig(), optim=OptimConfig(steps=500), seed=0)
    elapsed = time.perf_counter() - start
    last = result.log[-1]
    parts = ", ".join(f"{k}={last[k]:.4f}" for k in ("L_seg", "L_bnd", "L_con", "L_exp"))
    report(5, last["total"] < 0.05 and elapsed < 120,
           f"final total {last['total']:.4f} (<0.05) [{parts}], {elapsed:.1f}s (<120s)")


# --- 6/7. toy-scale trends ----------------------------------------------------------

def test_criterion_6_ablation_trend(tmp_path):
    start = time.perf_counter()
    cfg = RunConfig.load(TOY_CONFIG)
    sets = [("seg",), ("seg", "con", "exp"), ("seg", "bnd", "con", "exp")]
    rows = experiments.ablate(cfg, sets, [0, 1, 2, 3, 4], tmp_path)
    elapsed = time.perf_counter() - start
    seg, conexp, full = (r["f2px"] for r in rows)
    ok = full >= conexp >= seg and full - seg >= 0.02 and elapsed < 1800
    report(6, ok, f"F(2px) seg {seg:.4f}, con+exp {conexp:.4f}, full {full:.4f}; "
                  f"full-seg {full - seg:+.4f} (>=0.02), {elapsed:.0f}s (<1800s)")


def test_criterion_7_kernel_sweep(tmp_path):
    cfg = RunConfig.load(TOY_CONFIG)
    values = [1, 3, 5, 7, 9]
    rows = experiments.sweep_k(cfg, values, [0, 1, 2], tmp_path)
    scores = [r["f2px"] for r in rows]
    best = values[int(np.argmax(scores))]
    table = ", ".join(f"k={k}:{s:.4f}" for k, s in zip(values, scores))
    report(7, best not in (values[0], values[-1]), f"best k={best} [{table}]")


# --- 8. metric oracles ---------------------------------------------------------------

def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(8)
    mismatches, pairs = 0, 0
    for _ in range(500):
        gt = random_masks(rng, 1, max_size=16)[0]
        h, w = gt.shape
        pred = gt.copy()
        flip = rng.random((h, w)) < rng.uniform(0.0, 0.3)
        pred ^= flip
        pairs += 1
        for tol in metrics.DEFAULT_TOLERANCES:
            if metrics.boundary_f_score(pred, gt, tol) != f_score_bruteforce(pred, gt, tol):
                mismatches += 1
        for d in (1, 2):
            if metrics.boundary_iou(pred, gt, d) != boundary_iou_bruteforce(pred, gt, d):
                mismatches += 1
    gt = np.zeros((20, 20), dtype=bool)
    gt[3:17, 3:17] = True
    pred = gt.copy()
    pred[8:12, 8:12] = False
    biou, miou = metrics.boundary_iou(pred, gt), metrics.mask_iou(pred, gt)
    ok = mismatches == 0 and biou == 1.0 and miou < 1.0
    report(8, ok, f"{mismatches} mismatches over {pairs} pairs; interior error: "
                  f"boundary_iou={biou:.3f}, mask_iou={miou:.3f}")


# --- 9. determinism ------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    doc = {"seed": 5, "model": {"feat_channels": 8}, "optim": {"steps": 20, "batch_size": 4},
           "data": {"n_samples": 20}}
    dirs = []
    for name in ("a", "b"):
        cfg = RunConfig.from_dict({**doc, "out_dir": str(tmp_path / name)})
        experiments.run(cfg)
        dirs.append(tmp_path / name)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*")
                   if p.is_file() and p.name != experiments.CONFIG_ECHO)
    differ = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    report(9, not differ and len(files) > 3,
           f"{len(files)} checkpoint/report files compared, {len(differ)} differ {differ[:3]}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
