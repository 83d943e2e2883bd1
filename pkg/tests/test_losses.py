import math

import numpy as np
import pytest

from bsqueeze import losses as L
from bsqueeze.gradcheck import numeric_grad, relative_error
from bsqueeze.numcore import FeatureField, ShapeMismatchError, Tape, backward


def bce_oracle(z, t, w=1.0):
    total = 0.0
    for zi, ti in zip(z.ravel(), t.ravel()):
        p = 1.0 / (1.0 + math.exp(-zi))
        total += -(w * ti * math.log(p) + (1 - ti) * math.log(1 - p))
    return total / z.size


def dice_oracle(z, t, s=1.0):
    p = 1.0 / (1.0 + np.exp(-z))
    return 1.0 - (2 * (p * t).sum() + s) / (p.sum() + t.sum() + s)


def _field(a):
    return FeatureField(np.asarray(a, dtype=float).reshape(1, *np.shape(a)[-2:]))


def test_bce_zero_logits_is_ln2():
    t = np.random.default_rng(0).random((5, 5)) < 0.5
    assert float(L.bce(_field(np.zeros((5, 5))), t).value) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 3, (6, 7))
    t = (rng.random((6, 7)) < 0.4).astype(float)
    assert L.bce(_field(z), t).value == pytest.approx(bce_oracle(z, t), rel=1e-12)


def test_bce_stable_for_large_logits():
    z = np.array([[800.0, -800.0]])
    t = np.array([[1.0, 0.0]])
    v = L.bce(_field(z), t).value
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-12)
    v = L.bce(_field(z), 1 - t).value
    assert v == pytest.approx(800.0)


def test_weighted_bce_auto_weight():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(4, 4))
    t = np.zeros((4, 4))
    t[0, :3] = 1
    got = L.weighted_bce(_field(z), t).value
    assert got == pytest.approx(bce_oracle(z, t, 13 / 3), rel=1e-12)


def test_weighted_bce_fixed_and_no_positive_fallback():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 4))
    t = (rng.random((4, 4)) < 0.5).astype(float)
    assert L.weighted_bce(_field(z), t, 2.5).value == pytest.approx(bce_oracle(z, t, 2.5), rel=1e-12)
    zeros = np.zeros((4, 4))
    assert L.weighted_bce(_field(z), zeros).value == pytest.approx(L.bce(_field(z), zeros).value)


def test_weighted_bce_unit_weight_equals_bce():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 5))
    t = (rng.random((5, 5)) < 0.5).astype(float)
    assert L.weighted_bce(_field(z), t, 1.0).value == L.bce(_field(z), t).value


def test_dice_values():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(6, 6))
    t = (rng.random((6, 6)) < 0.3).astype(float)
    assert L.dice_loss(_field(z), t, 1.0).value == pytest.approx(dice_oracle(z, t, 1.0), rel=1e-12)
    # confident perfect prediction
    perfect = np.where(t > 0, 50.0, -50.0)
    assert L.dice_loss(_field(perfect), t).value == pytest.approx(0.0, abs=1e-12)
    # empty target with confident negatives: smoothing keeps it at 0
    assert L.dice_loss(_field(np.full((6, 6), -50.0)), np.zeros((6, 6))).value == pytest.approx(0.0, abs=1e-12)


def test_dice_rejects_bad_smooth_and_shapes():
    with pytest.raises(ValueError):
        L.dice_loss(_field(np.zeros((3, 3))), np.zeros((3, 3)), 0.0)
    with pytest.raises(ShapeMismatchError):
        L.bce(_field(np.zeros((3, 3))), np.zeros((3, 4)))


@pytest.mark.parametrize("fn", [
    lambda z, t: L.bce(z, t),
    lambda z, t: L.weighted_bce(z, t),
    lambda z, t: L.weighted_bce(z, t, 3.0),
    lambda z, t: L.dice_loss(z, t, 1.0),
    lambda z, t: L.dice_loss(z, t, 0.5),
], ids=["bce", "wbce_auto", "wbce_fixed", "dice", "dice_smooth_half"])
def test_loss_gradients(fn):
    rng = np.random.default_rng(6)
    z = FeatureField(rng.normal(0, 2, (1, 5, 5)))
    t = (rng.random((5, 5)) < 0.4).astype(float)
    with Tape() as tape:
        out = fn(z, t)
    backward(out, tape)
    num = numeric_grad(lambda: float(fn(z, t).value), z.values, 1e-6)
    assert relative_error(z.grad, num) < 1e-4


def _preds_targets(rng, branches=L.BRANCHES):
    preds = {b: FeatureField(rng.normal(size=(1, 4, 4))) for b in branches}
    targets = {b: rng.random((4, 4)) < 0.4 for b in branches}
    return preds, targets


def test_mask_loss_is_sum_of_branch_terms():
    rng = np.random.default_rng(7)
    preds, targets = _preds_targets(rng)
    cfg = L.LossConfig()
    total, parts = L.mask_loss(preds, targets, cfg)
    expect = {
        "seg": bce_oracle(preds["seg"].values, targets["seg"]),
        "bnd": bce_oracle(preds["bnd"].values, targets["bnd"]) + dice_oracle(preds["bnd"].values[0], targets["bnd"]),
        "con": dice_oracle(preds["con"].values[0], targets["con"]),
        "exp": dice_oracle(preds["exp"].values[0], targets["exp"]),
    }
    for b in L.BRANCHES:
        assert parts[b] == pytest.approx(expect[b], rel=1e-12)
    assert total.value == pytest.approx(sum(expect.values()), rel=1e-12)


def test_mask_loss_seg_only_is_bce():
    rng = np.random.default_rng(8)
    preds, targets = _preds_targets(rng, ("seg",))
    total, parts = L.mask_loss(preds, targets, L.LossConfig(), ("seg",))
    assert list(parts) == ["seg"]
    assert total.value == L.bce(preds["seg"], targets["seg"]).value


def test_mask_loss_weights_and_combo_override():
    rng = np.random.default_rng(9)
    preds, targets = _preds_targets(rng)
    base, parts = L.mask_loss(preds, targets, L.LossConfig())
    scaled, _ = L.mask_loss(preds, targets, L.LossConfig(weights={"con": 2.0}))
    assert scaled.value == pytest.approx(base.value + parts["con"], rel=1e-12)
    combo = {"seg": ["wbce"], "bnd": ["dice"], "con": ["dice"], "exp": ["dice"]}
    _, parts2 = L.mask_loss(preds, targets, L.LossConfig(combo=combo))
    assert parts2["seg"] == pytest.approx(L.weighted_bce(preds["seg"], targets["seg"]).value)


def test_mask_loss_missing_branch():
    rng = np.random.default_rng(10)
    preds, targets = _preds_targets(rng, ("seg", "con"))
    with pytest.raises(L.MissingBranchError):
        L.mask_loss(preds, targets, L.LossConfig())
    with pytest.raises(L.MissingBranchError):
        L.mask_loss(preds, targets, L.LossConfig(), ())


def test_loss_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(dice_smooth=0)
    with pytest.raises(ValueError):
        L.LossConfig(pos_weight_mode="median")
    with pytest.raises(ValueError):
        L.LossConfig(combo={"seg": ["focal"]})
    with pytest.raises(ValueError):
        L.LossConfig(weights={"edge": 1.0})


def test_mask_loss_gradient_through_sum():
    rng = np.random.default_rng(11)
    preds, targets = _preds_targets(rng)
    cfg = L.LossConfig()
    with Tape() as tape:
        total, _ = L.mask_loss(preds, targets, cfg)
    backward(total, tape)
    for b in L.BRANCHES:
        num = numeric_grad(lambda: float(L.mask_loss(preds, targets, cfg)[0].value), preds[b].values, 1e-6)
        assert relative_error(preds[b].grad, num) < 1e-4
