"""Training losses: Dice, weighted focal, and the combined deep-supervision total.

Conventions baked in here:
  - dice keeps its smoothing epsilon inside the doubled numerator, so a
    perfect all-ones match scores -1/9 on a 2x2 map with epsilon 1 (and two
    empty maps score exactly -1);
  - the focal term is the sign-corrected weighted form
    -mean[y*w_pos*(1-p)^g*log p + (1-y)*w_neg*p^g*log(1-p)]
    with probabilities clamped away from {0, 1};
  - auxiliary heads are scored against block-max downsampled targets and
    skipped entirely when aux_weight is 0.
"""

from dataclasses import dataclass

import numpy as np

from canet import ops
from canet.tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1.0
    gamma: float = 2.0
    w_pos: float = 0.01
    w_neg: float = 0.99
    lambda_dice: float = 1.0
    lambda_focal: float = 100.0
    aux_weight: float = 1.0
    prob_clamp: float = 1e-7

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.w_pos < 0 or self.w_neg < 0:
            raise ValueError(
                f"class weights must be non-negative, got {self.w_pos}, {self.w_neg}"
            )
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(
                f"prob_clamp must lie in (0, 0.5), got {self.prob_clamp}"
            )


def dice_loss(p, y, epsilon=1.0):
    """1 - 2*(sum(y*p) + eps) / (sum(y) + sum(p) + eps)."""
    if p.shape != y.shape:
        raise ValueError(
            f"dice_loss shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}"
        )
    num = (y * p).sum() + epsilon
    den = y.sum() + p.sum() + epsilon
    return 1.0 - 2.0 * num / den


def weighted_focal_loss(p, y, cfg):
    if p.shape != y.shape:
        raise ValueError(
            f"weighted_focal_loss shape mismatch: {tuple(p.shape)} vs {tuple(y.shape)}"
        )
    pc = p.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    q = 1.0 - pc
    pos = y * ((q ** cfg.gamma) * pc.log()) * cfg.w_pos
    neg = (1.0 - y) * ((pc ** cfg.gamma) * q.log()) * cfg.w_neg
    return -((pos + neg).mean())


def _head_loss(logits, target, cfg):
    p = ops.sigmoid(logits)
    y = Tensor(target.astype(logits.data.dtype))
    return cfg.lambda_dice * dice_loss(p, y, cfg.epsilon) \
        + cfg.lambda_focal * weighted_focal_loss(p, y, cfg)


def _downsample_targets(target, factor):
    b, c, h, w = target.shape
    blocks = target.reshape(b, c, h // factor, factor, w // factor, factor)
    return blocks.any(axis=(3, 5))


def total_loss(main_logits, aux_logits, target, cfg):
    """Weighted dice+focal on the main head plus each auxiliary head.

    `target` is the full-resolution binary ground truth, shaped like the
    main logits; each auxiliary head is compared against the block-max
    downsampling of it at that head's resolution.
    """
    target = np.asarray(target) != 0
    if target.shape != tuple(main_logits.shape):
        raise ValueError(
            f"target shape {target.shape} does not match main logits "
            f"{tuple(main_logits.shape)}"
        )
    _, _, h, w = main_logits.shape
    total = _head_loss(main_logits, target, cfg)
    if cfg.aux_weight == 0.0:
        return total
    for i, aux in enumerate(aux_logits):
        _, _, ha, wa = aux.shape
        if h % ha or w % wa or h // ha != w // wa:
            raise ValueError(
                f"aux head {i} resolution {ha}x{wa} does not evenly divide "
                f"target resolution {h}x{w}"
            )
        factor = h // ha
        if factor & (factor - 1):
            raise ValueError(
                f"aux head {i} downsample factor {factor} is not a power of two"
            )
        down = _downsample_targets(target, factor)
        total = total + cfg.aux_weight * _head_loss(aux, down, cfg)
    return total
