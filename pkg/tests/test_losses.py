"""Loss values against closed forms, hand gradients against finite
differences, and the weighted-total contract."""

import numpy as np
import pytest

from spineseg.gradcheck import finite_diff_check
from spineseg.losses import LossWeights, bce_loss, dice_loss, total_loss
from spineseg.tensor import Tape, Tensor


def _pm(rng, shape=(1, 1, 6, 6)):
    pred = Tensor(rng.uniform(0.02, 0.98, shape), requires_grad=True)
    mask = Tensor((rng.random(shape) < 0.5).astype(np.float64))
    return pred, mask


# ---------------------------------------------------------------------------
# values


def test_bce_of_half_map_is_ln2(rng):
    p = Tensor(np.full((1, 1, 8, 8), 0.5))
    m = Tensor((rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64))
    assert abs(float(bce_loss(p, m).data[0]) - np.log(2.0)) <= 1e-12


def test_bce_matches_direct_formula(rng):
    pred, mask = _pm(rng)
    p, m = pred.data, mask.data
    want = float(np.mean(-(m * np.log(p) + (1 - m) * np.log(1 - p))))
    assert float(bce_loss(pred, mask).data[0]) == pytest.approx(want, rel=1e-12)


def test_bce_clamps_extreme_predictions():
    pred = Tensor(np.array([[[[0.0, 1.0]]]]))
    mask = Tensor(np.array([[[[1.0, 0.0]]]]))  # worst case without clamp: inf
    val = float(bce_loss(pred, mask).data[0])
    assert np.isfinite(val)
    assert val == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_dice_loss_is_zero_on_exact_binary_match(rng):
    m = (rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64)
    assert float(dice_loss(Tensor(m), Tensor(m)).data[0]) <= 1e-6


def test_dice_loss_matches_direct_formula(rng):
    pred, mask = _pm(rng)
    p, m = pred.data, mask.data
    eps = 1e-6
    want = 1 - (2 * (p * m).sum() + eps) / ((p * p).sum() + (m * m).sum() + eps)
    assert float(dice_loss(pred, mask).data[0]) == pytest.approx(want, rel=1e-12)


def test_dice_loss_of_disjoint_masks_is_near_one():
    p = np.zeros((1, 1, 4, 4)); p[..., :2] = 1.0
    m = np.zeros((1, 1, 4, 4)); m[..., 2:] = 1.0
    assert float(dice_loss(Tensor(p), Tensor(m)).data[0]) == pytest.approx(1.0, abs=1e-6)


def test_dice_rejects_nonpositive_eps(rng):
    pred, mask = _pm(rng)
    with pytest.raises(ValueError):
        dice_loss(pred, mask, eps=0.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


# ---------------------------------------------------------------------------
# gradients (finite-difference, independent of the hand derivation)


def test_bce_gradient_passes_finite_difference(rng):
    pred, mask = _pm(rng)
    rep = finite_diff_check(lambda: bce_loss(pred, mask), [pred],
                            max_coords=12, rng=rng, name="bce")
    assert rep.passed, rep


def test_dice_gradient_passes_finite_difference(rng):
    pred, mask = _pm(rng)
    rep = finite_diff_check(lambda: dice_loss(pred, mask), [pred],
                            max_coords=12, rng=rng, name="dice")
    assert rep.passed, rep


def test_total_loss_gradient_passes_finite_difference(rng):
    pc, mask = _pm(rng)
    pf, _ = _pm(rng)
    rep = finite_diff_check(lambda: total_loss(pc, pf, mask), [pc, pf],
                            max_coords=8, rng=rng, name="total")
    assert rep.passed, rep


def test_clamped_pixels_get_no_gradient():
    pred = Tensor(np.array([[[[0.0, 0.5]]]]), requires_grad=True)
    mask = Tensor(np.array([[[[1.0, 1.0]]]]))
    with Tape() as tape:
        tape.backward(bce_loss(pred, mask))
    assert pred.grad[0, 0, 0, 0] == 0.0      # below the clamp: plateau
    assert pred.grad[0, 0, 0, 1] != 0.0


# ---------------------------------------------------------------------------
# weighted total


def test_total_is_weighted_sum_of_stage_losses(rng):
    pc, mask = _pm(rng)
    pf, _ = _pm(rng)
    w = LossWeights(lambda_c=0.3, lambda_f=0.9)
    want = (0.3 * (float(bce_loss(pc, mask).data[0])
                   + float(dice_loss(pc, mask).data[0]))
            + 0.9 * (float(bce_loss(pf, mask).data[0])
                     + float(dice_loss(pf, mask).data[0])))
    got = float(total_loss(pc, pf, mask, w).data[0])
    assert got == pytest.approx(want, rel=1e-12)


def test_zero_coarse_weight_ignores_coarse_map_exactly(rng):
    pf, mask = _pm(rng)
    w = LossWeights(lambda_c=0.0, lambda_f=0.6)
    vals = set()
    for _ in range(3):
        pc = Tensor(rng.uniform(0.01, 0.99, pf.data.shape))
        vals.add(float(total_loss(pc, pf, mask, w).data[0]))
    assert len(vals) == 1  # bit-identical across coarse maps


def test_zero_coarse_weight_sends_no_gradient_to_coarse(rng):
    pc, mask = _pm(rng)
    pf, _ = _pm(rng)
    with Tape() as tape:
        tape.backward(total_loss(pc, pf, mask, LossWeights(0.0, 1.0)))
    assert pc.grad is None or not np.any(pc.grad)
    assert np.any(pf.grad)


def test_both_weights_zero_rejected(rng):
    pc, mask = _pm(rng)
    with pytest.raises(ValueError):
        total_loss(pc, pc, mask, LossWeights(0.0, 0.0))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5).validate()
