"""The weighted Focal LogDice loss and its ablation family.

Four variants over 6-class logits:

* CE            - plain cross-entropy (focal with gamma=0, unit weights)
* Focal         - class-weighted focal loss
* FocalDice     - w_f * focal + w_d * (1 - mean soft Dice)
* FocalLogDice  - w_f * focal + w_d * mean_i (-ln Dice_i)^gamma_d

Soft Dice is accumulated per class over the whole batch, matching the
evaluation module's global-count convention. Targets are integer masks;
probabilities come from a per-pixel channel softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, LabelError
from .tensor import Tensor, softmax_channel

VARIANTS = ("CE", "Focal", "FocalDice", "FocalLogDice")

# Backward-pass guard for (-ln d)^g with g < 1: the forward value is
# exact, the derivative is evaluated no closer to zero than this.
_POW_GRAD_FLOOR = 1e-12


@dataclass
class LossConfig:
    variant: str = "FocalLogDice"
    w_focal: float = 0.4
    w_dice: float = 0.6
    focal_gamma: float = 2.0
    dice_gamma: float = 0.3
    smooth_eps: float = 1e-5
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(6))

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)

    @property
    def num_classes(self) -> int:
        return len(self.class_weights)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown loss variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}"
            )
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.dice_gamma <= 0:
            raise ConfigError(f"dice_gamma must be > 0, got {self.dice_gamma}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")
        if (self.class_weights <= 0).any():
            raise ConfigError("class_weights must all be positive")
        if self.w_focal < 0 or self.w_dice < 0 or self.w_focal + self.w_dice == 0:
            raise ConfigError("combo weights must be non-negative and not both zero")
        if self.variant == "FocalLogDice":
            # keep the combo weights a convex pair
            total = self.w_focal + self.w_dice
            if total != 1.0:
                self.w_focal /= total
                self.w_dice /= total


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse pixel-frequency weights, normalized to mean 1."""
    counts = np.asarray(counts, dtype=np.float64)
    w = 1.0 / np.maximum(counts, 1.0)
    return w / w.mean()


def _check_target(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        rounded = np.rint(target)
        if not np.array_equal(rounded, target):
            raise LabelError("target mask contains non-integer values")
        target = rounded.astype(np.int64)
    bad = (target < 0) | (target >= num_classes)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelError(
            f"mask value {int(target[pos])} at position {pos} outside 0..{num_classes - 1}"
        )
    return target.astype(np.int64)


def _onehot(target: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    eye = np.eye(num_classes, dtype=dtype)
    oh = eye[target]                      # (N,H,W,C)
    return np.ascontiguousarray(np.moveaxis(oh, -1, 1))


def _focal_from_probs(probs: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    onehot = _onehot(target, cfg.num_classes, probs.dtype.type)
    p_true = (probs * onehot).sum(axis=1)           # (N,H,W)
    p_true = p_true.clip(cfg.smooth_eps, 1.0)
    alpha = cfg.class_weights.astype(probs.dtype.type)[target]
    term = p_true.log() * alpha
    if cfg.focal_gamma != 0.0:
        term = term * (1.0 - p_true).pow(cfg.focal_gamma)
    return -term.mean()


def soft_dice_per_class(probs: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Per-class soft Dice over the whole batch; shape (num_classes,).

    An empty class (no probability mass and no target pixels) smooths to
    eps/eps = 1 and therefore contributes no loss.
    """
    onehot = _onehot(target, cfg.num_classes, probs.dtype.type)
    inter = (probs * onehot).sum(axis=(0, 2, 3))
    p_sum = probs.sum(axis=(0, 2, 3))
    t_sum = onehot.sum(axis=(0, 2, 3))
    eps = cfg.smooth_eps
    return (inter * 2.0 + eps) / (p_sum + t_sum + eps)


def _logdice_from_probs(probs: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    dice = soft_dice_per_class(probs, target, cfg)
    # clip guards against d landing one ulp above 1 from float rounding
    neg_log = (-dice.log()).clip(0.0, None)
    return neg_log.pow(cfg.dice_gamma, grad_floor=_POW_GRAD_FLOOR).mean()


def _plain_dice_from_probs(probs: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    return 1.0 - soft_dice_per_class(probs, target, cfg).mean()


def weighted_focal(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean over pixels of -alpha_c * (1 - p_c)^gamma * ln(p_c)."""
    target = _check_target(target, cfg.num_classes)
    return _focal_from_probs(softmax_channel(logits), target, cfg)


def exp_log_dice(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean over classes of (-ln Dice_i)^gamma_d with batch-level Dice."""
    target = _check_target(target, cfg.num_classes)
    return _logdice_from_probs(softmax_channel(logits), target, cfg)


def focal_logdice(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """w_focal * focal + w_dice * exponential log Dice (one fused addition)."""
    target = _check_target(target, cfg.num_classes)
    probs = softmax_channel(logits)
    return (_focal_from_probs(probs, target, cfg) * cfg.w_focal
            + _logdice_from_probs(probs, target, cfg) * cfg.w_dice)


def focal_dice(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """w_focal * focal + w_dice * (1 - mean soft Dice)."""
    target = _check_target(target, cfg.num_classes)
    probs = softmax_channel(logits)
    return (_focal_from_probs(probs, target, cfg) * cfg.w_focal
            + _plain_dice_from_probs(probs, target, cfg) * cfg.w_dice)


def loss_by_variant(cfg: LossConfig):
    """Return the (logits, target) -> scalar loss for cfg.variant."""
    cfg.validate()
    if cfg.variant == "CE":
        ce_cfg = replace(cfg, focal_gamma=0.0,
                         class_weights=np.ones(cfg.num_classes))
        return lambda logits, target: weighted_focal(logits, target, ce_cfg)
    if cfg.variant == "Focal":
        return lambda logits, target: weighted_focal(logits, target, cfg)
    if cfg.variant == "FocalDice":
        return lambda logits, target: focal_dice(logits, target, cfg)
    return lambda logits, target: focal_logdice(logits, target, cfg)
