import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bsqueeze import metrics as M
from oracles import boundary_iou_bruteforce, f_score_bruteforce, random_masks


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _random_pairs(rng, count):
    pairs = []
    for m in random_masks(rng, count, max_size=16):
        other = m.copy()
        style = rng.integers(3)
        if style == 0:
            other = np.roll(m, tuple(rng.integers(-2, 3, 2)), axis=(0, 1))
        elif style == 1:
            flip = rng.random(m.shape) < 0.1
            other = m ^ flip
        else:
            other = rng.random(m.shape) < 0.5
        pairs.append((m, other))
    return pairs


def test_identical_masks_score_one():
    m = _disk(16, 7, 8, 5)
    assert M.mask_iou(m, m) == 1.0
    assert M.boundary_iou(m, m) == 1.0
    for t in M.DEFAULT_TOLERANCES:
        assert M.boundary_f_score(m, m, t) == 1.0


def test_empty_cases():
    e = np.zeros((8, 8), dtype=bool)
    m = _disk(8, 4, 4, 2)
    assert M.mask_iou(e, e) == 1.0
    assert M.boundary_f_score(e, e, 2) == 1.0
    assert M.boundary_iou(e, e) == 1.0
    assert M.boundary_f_score(e, m, 2) == 0.0
    assert M.boundary_f_score(m, e, 2) == 0.0


def test_one_pixel_shift_within_tolerance():
    m = _disk(20, 9, 9, 5)
    shifted = np.roll(m, 1, axis=1)
    assert M.boundary_f_score(shifted, m, 1) == 1.0
    assert M.boundary_f_score(shifted, m, 2) == 1.0
    assert M.mask_iou(shifted, m) < 1.0


def test_three_pixel_shift_only_counts_at_wide_tolerance():
    m = np.zeros((20, 20), dtype=bool)
    m[5:15, 5:11] = True
    shifted = np.roll(m, 3, axis=1)
    assert M.boundary_f_score(shifted, m, 1) < M.boundary_f_score(shifted, m, 3)
    assert M.boundary_f_score(shifted, m, 3) == 1.0


def test_interior_hole_leaves_boundary_iou_at_one():
    gt = np.zeros((20, 20), dtype=bool)
    gt[3:17, 3:17] = True
    pred = gt.copy()
    pred[8:12, 8:12] = False  # 5 px from the contour, deeper than d
    assert M.mask_iou(pred, gt) == pytest.approx(180 / 196)
    for d in (1, 2, 3):
        assert M.boundary_iou(pred, gt, d) == 1.0
    # once the band is wide enough to reach the hole the two bands differ
    assert M.boundary_iou(pred, gt, 6) < 1.0


def test_band_matches_literal_rule_without_holes():
    from bsqueeze.morphology import erode

    rng = np.random.default_rng(5)
    for _ in range(50):
        m = _disk(16, *rng.uniform(3, 13, 2), rng.uniform(2, 7))
        for d in (1, 2):
            np.testing.assert_array_equal(M.band(m, d), m & ~erode(m, 2 * d + 1))


def test_metric_oracles_on_random_pairs():
    rng = np.random.default_rng(0)
    for pred, gt in _random_pairs(rng, 150):
        for t in (1, 2, 3):
            assert M.boundary_f_score(pred, gt, t) == pytest.approx(f_score_bruteforce(pred, gt, t), abs=1e-12)
        for d in (1, 2):
            assert M.boundary_iou(pred, gt, d) == pytest.approx(boundary_iou_bruteforce(pred, gt, d), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pairs(rng, 1)[0]
    assert M.mask_iou(a, b) == M.mask_iou(b, a)
    assert M.boundary_iou(a, b) == M.boundary_iou(b, a)
    for t in (1, 2):
        assert M.boundary_f_score(a, b, t) == pytest.approx(M.boundary_f_score(b, a, t), abs=1e-15)


def test_translation_invariance_with_margin():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = np.zeros((24, 24), dtype=bool)
        b = np.zeros((24, 24), dtype=bool)
        a[6:16, 6:16] = rng.random((10, 10)) < 0.7
        b[6:16, 6:16] = rng.random((10, 10)) < 0.7
        dy, dx = rng.integers(-4, 5, 2)
        sa, sb = np.roll(a, (dy, dx), (0, 1)), np.roll(b, (dy, dx), (0, 1))
        assert M.boundary_f_score(a, b, 2) == M.boundary_f_score(sa, sb, 2)
        assert M.boundary_iou(a, b) == M.boundary_iou(sa, sb)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_f_score_monotone_in_tolerance(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pairs(rng, 1)[0]
    scores = [M.boundary_f_score(a, b, t) for t in (1, 2, 3, 5)]
    assert all(x <= y + 1e-15 for x, y in zip(scores, scores[1:]))


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (10, 10)), arrays(bool, (10, 10)))
def test_scores_in_unit_interval(a, b):
    for v in (M.mask_iou(a, b), M.boundary_iou(a, b), M.boundary_f_score(a, b, 2)):
        assert 0.0 <= v <= 1.0


def test_shape_mismatch_and_bad_args():
    with pytest.raises(ValueError):
        M.mask_iou(np.zeros((3, 3), bool), np.zeros((3, 4), bool))
    with pytest.raises(ValueError):
        M.boundary_f_score(np.zeros((3, 3), bool), np.zeros((3, 3), bool), 0)
    with pytest.raises(ValueError):
        M.boundary_iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool), 0)


def test_report_outputs(tmp_path):
    rng = np.random.default_rng(2)
    pairs = _random_pairs(rng, 5)
    report = M.evaluate_pairs(pairs)
    means = report.means()
    assert means["count"] == 5
    assert means["mask_iou"] == pytest.approx(np.mean([M.mask_iou(p, g) for p, g in pairs]))
    report.write_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["aggregate"]["f2px"] == pytest.approx(means["f2px"])
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("id,mask_iou,boundary_iou,f1px") and len(lines) == 6
    table = report.table()
    assert "F1(2px)" in table and "(n=5)" in table
