"""Dice, weighted focal, and the combined deep-supervision loss."""

import math

import numpy as np
import pytest

from canet import ops
from canet.losses import (
    LossConfig,
    dice_loss,
    total_loss,
    weighted_focal_loss,
)
from canet.tensor import Tensor

from _gradcheck import gradcheck
from _oracles import dice_loss_scalar, focal_loss_scalar


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# hand values


def test_dice_perfect_ones_2x2():
    p = t64(np.ones((2, 2)))
    y = t64(np.ones((2, 2)))
    # 1 - 2*(4+1)/(4+4+1) = -1/9
    assert abs(dice_loss(p, y, 1.0).item() - (-1.0 / 9.0)) <= 1e-12


def test_dice_both_empty():
    z = t64(np.zeros((2, 2)))
    assert abs(dice_loss(z, z, 1.0).item() - (-1.0)) <= 1e-12


def test_dice_disjoint_is_near_zero():
    p = t64([[1.0, 0.0]])
    y = t64([[0.0, 1.0]])
    # 1 - 2*eps/(2+eps), eps=0.5 -> 1 - 1/2.5 = 0.6
    assert abs(dice_loss(p, y, 0.5).item() - 0.6) <= 1e-12


def test_focal_single_pixel_hand_value():
    cfg = LossConfig(gamma=2.0, w_pos=0.01, w_neg=0.99)
    p = t64([[0.5]])
    y = t64([[1.0]])
    got = weighted_focal_loss(p, y, cfg).item()
    assert abs(got - 0.0017329) <= 1e-7
    assert abs(got - (-0.01 * 0.25 * math.log(0.5))) <= 1e-15


def test_focal_single_negative_pixel():
    cfg = LossConfig(gamma=2.0, w_pos=0.01, w_neg=0.99)
    got = weighted_focal_loss(t64([[0.5]]), t64([[0.0]]), cfg).item()
    assert abs(got - (-0.99 * 0.25 * math.log(0.5))) <= 1e-15


def test_focal_finite_at_extreme_probabilities():
    cfg = LossConfig()
    p = t64([[0.0, 1.0], [1.0, 0.0]])
    y = t64([[1.0, 0.0], [0.0, 1.0]])
    value = weighted_focal_loss(p, y, cfg).item()
    assert np.isfinite(value)
    # every pixel is confidently wrong: clamped log dominates
    assert value > 0.01


# ---------------------------------------------------------------------------
# oracle comparison on random maps


@pytest.mark.parametrize("seed", range(5))
def test_dice_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (3, 7))
    y = (rng.uniform(0, 1, (3, 7)) < 0.3).astype(np.float64)
    eps = rng.uniform(0.1, 2.0)
    got = dice_loss(t64(p), t64(y), eps).item()
    assert abs(got - dice_loss_scalar(p, y, eps)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_focal_matches_scalar_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    p = rng.uniform(0, 1, (4, 5))
    y = (rng.uniform(0, 1, (4, 5)) < 0.4).astype(np.float64)
    cfg = LossConfig(
        gamma=rng.uniform(1.0, 3.0),
        w_pos=rng.uniform(0.01, 2.0),
        w_neg=rng.uniform(0.01, 2.0),
    )
    got = weighted_focal_loss(t64(p), t64(y), cfg).item()
    expected = focal_loss_scalar(p, y, cfg.gamma, cfg.w_pos, cfg.w_neg,
                                 cfg.prob_clamp)
    assert abs(got - expected) <= 1e-12


# ---------------------------------------------------------------------------
# gradients


def test_dice_gradcheck():
    rng = np.random.default_rng(7)
    logits = rng.normal(0, 2, (1, 1, 4, 4))
    y = (rng.uniform(0, 1, (1, 1, 4, 4)) < 0.4).astype(np.float64)

    def build(ts):
        return dice_loss(ops.sigmoid(ts[0]), Tensor(y), 1.0)

    gradcheck(build, [logits], rel_tol=1e-6)


def test_focal_gradcheck():
    rng = np.random.default_rng(8)
    # logits within +-3: probabilities far from the clamp edges
    logits = rng.uniform(-3, 3, (1, 1, 4, 4))
    y = (rng.uniform(0, 1, (1, 1, 4, 4)) < 0.4).astype(np.float64)
    cfg = LossConfig(w_pos=1.0, w_neg=1.0)

    def build(ts):
        return weighted_focal_loss(ops.sigmoid(ts[0]), Tensor(y), cfg)

    gradcheck(build, [logits], rel_tol=1e-6)


def test_total_loss_gradcheck():
    rng = np.random.default_rng(9)
    main = rng.uniform(-3, 3, (1, 1, 4, 4))
    aux = rng.uniform(-3, 3, (1, 1, 2, 2))
    target = rng.uniform(0, 1, (1, 1, 4, 4)) < 0.4
    cfg = LossConfig(w_pos=1.0, w_neg=1.0, lambda_focal=2.0, aux_weight=0.5)

    def build(ts):
        return total_loss(ts[0], [ts[1]], target, cfg)

    gradcheck(build, [main, aux], rel_tol=1e-6)


# ---------------------------------------------------------------------------
# the combined loss


def head_value(logits, target, cfg):
    p = ops.sigmoid(t64(logits))
    y = t64(target.astype(np.float64))
    return (cfg.lambda_dice * dice_loss(p, y, cfg.epsilon)
            + cfg.lambda_focal * weighted_focal_loss(p, y, cfg)).item()


def test_total_loss_additivity():
    rng = np.random.default_rng(21)
    main = rng.normal(0, 2, (2, 1, 8, 8))
    auxes = [rng.normal(0, 2, (2, 1, 8 // f, 8 // f)) for f in (8, 4, 2)]
    target = rng.uniform(0, 1, (2, 1, 8, 8)) < 0.3
    cfg = LossConfig(aux_weight=0.7)

    got = total_loss(t64(main), [t64(a) for a in auxes], target, cfg).item()
    expected = head_value(main, target, cfg)
    for a in auxes:
        f = 8 // a.shape[2]
        down = target.reshape(2, 1, 8 // f, f, 8 // f, f).any(axis=(3, 5))
        expected += cfg.aux_weight * head_value(a, down, cfg)
    assert abs(got - expected) <= 1e-12


def test_total_loss_no_aux_is_main_only():
    rng = np.random.default_rng(22)
    main = rng.normal(0, 1, (1, 1, 4, 4))
    target = rng.uniform(0, 1, (1, 1, 4, 4)) < 0.5
    cfg = LossConfig()
    got = total_loss(t64(main), [], target, cfg).item()
    assert got == pytest.approx(head_value(main, target, cfg), abs=1e-15)


def test_total_loss_zero_aux_weight_bitwise():
    rng = np.random.default_rng(23)
    main = rng.normal(0, 1, (1, 1, 8, 8))
    aux = rng.normal(0, 1, (1, 1, 4, 4))
    target = rng.uniform(0, 1, (1, 1, 8, 8)) < 0.3
    with_aux = total_loss(t64(main), [t64(aux)], target,
                          LossConfig(aux_weight=0.0)).item()
    without = total_loss(t64(main), [], target, LossConfig()).item()
    assert with_aux == without  # bitwise


def test_total_loss_downsamples_targets_by_block_max():
    # a single set pixel must survive into every coarser target
    target = np.zeros((1, 1, 8, 8), dtype=bool)
    target[0, 0, 5, 6] = True
    cfg = LossConfig(lambda_focal=0.0, aux_weight=1.0)
    main = t64(np.full((1, 1, 8, 8), -9.0))
    aux = t64(np.full((1, 1, 2, 2), -9.0))
    got = total_loss(main, [aux], target, cfg).item()
    down = np.zeros((1, 1, 2, 2), dtype=bool)
    down[0, 0, 1, 1] = True  # block (5..8, 4..8) catches (5, 6)
    expected = (head_value(main.data, target, cfg)
                + head_value(aux.data, down, cfg))
    assert abs(got - expected) <= 1e-12


def test_total_loss_accepts_nonboolean_targets():
    rng = np.random.default_rng(24)
    main = rng.normal(0, 1, (1, 1, 4, 4))
    mask = rng.uniform(0, 1, (1, 1, 4, 4)) < 0.5
    as_bytes = np.where(mask, np.uint8(255), np.uint8(0))
    a = total_loss(t64(main), [], mask, LossConfig()).item()
    b = total_loss(t64(main), [], as_bytes, LossConfig()).item()
    assert a == b


# ---------------------------------------------------------------------------
# validation


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_loss(t64(np.zeros((2, 2))), t64(np.zeros((2, 3))))


def test_focal_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        weighted_focal_loss(t64(np.zeros((2, 2))), t64(np.zeros((3, 2))),
                            LossConfig())


def test_total_loss_target_shape_mismatch():
    with pytest.raises(ValueError, match="target shape"):
        total_loss(t64(np.zeros((1, 1, 4, 4))), [],
                   np.zeros((1, 1, 8, 8), dtype=bool), LossConfig())


def test_total_loss_aux_must_evenly_divide():
    target = np.zeros((1, 1, 8, 8), dtype=bool)
    with pytest.raises(ValueError, match="evenly divide"):
        total_loss(t64(np.zeros((1, 1, 8, 8))), [t64(np.zeros((1, 1, 3, 3)))],
                   target, LossConfig())
    # anisotropic factors rejected too
    with pytest.raises(ValueError, match="evenly divide"):
        total_loss(t64(np.zeros((1, 1, 8, 8))), [t64(np.zeros((1, 1, 2, 4)))],
                   target, LossConfig())


def test_total_loss_aux_factor_power_of_two():
    target = np.zeros((1, 1, 12, 12), dtype=bool)
    with pytest.raises(ValueError, match="power of two"):
        total_loss(t64(np.zeros((1, 1, 12, 12))),
                   [t64(np.zeros((1, 1, 4, 4)))], target, LossConfig())


@pytest.mark.parametrize("kw,msg", [
    (dict(epsilon=0.0), "epsilon"),
    (dict(w_pos=-0.1), "class weights"),
    (dict(prob_clamp=0.0), "prob_clamp"),
    (dict(prob_clamp=0.5), "prob_clamp"),
])
def test_loss_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        LossConfig(**kw).validate()
