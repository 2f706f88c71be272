"""Segmentation losses: BCE, Dice, their weighted sum, and the deep-supervision total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import DimensionError, Tensor

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    # weights for the auxiliary masks of decoder stages 2..6
    gamma: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2, 0.1)
    dice_smoothing: float = 1.0
    final_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError(f"alpha and beta must be >= 0 and not both zero, got {self.alpha}, {self.beta}")
        if any(g < 0 for g in self.gamma):
            raise ValueError(f"gamma entries must be >= 0, got {self.gamma}")
        if self.dice_smoothing <= 0:
            raise ValueError("dice_smoothing must be positive")


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    pred = tc.as_tensor(pred)
    target = tc.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def bce_loss(pred, target) -> Tensor:
    pred, target = _pair(pred, target)
    p = tc.clip(pred, BCE_EPS, 1 - BCE_EPS)
    ll = target * tc.log(p) + (1.0 - target) * tc.log(1.0 - p)
    return -ll.mean()


def dice_loss(pred, target, smoothing: float = 1.0) -> Tensor:
    """1 - (2|P.T| + s) / (|P| + |T| + s) per sample, averaged over the batch."""
    pred, target = _pair(pred, target)
    axes = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(axis=axes)
    denom = pred.sum(axis=axes) + target.sum(axis=axes) + smoothing
    return (1.0 - (2.0 * inter + smoothing) / denom).mean()


def combined_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * BCE + beta * Dice. A zero weight drops that term from the graph."""
    terms = []
    if cfg.alpha:
        terms.append(cfg.alpha * bce_loss(pred, target))
    if cfg.beta:
        terms.append(cfg.beta * dice_loss(pred, target, cfg.dice_smoothing))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def layer_wise_loss(output, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """final_weight * L(mask) + sum_i gamma_i * L(aux_i) over the stage 2..6 taps."""
    total = combined_loss(output.mask, target, cfg)
    if cfg.final_weight != 1.0:
        total = cfg.final_weight * total
    aux = dict(output.aux_masks)
    for stage, g in zip(range(2, 2 + len(cfg.gamma)), cfg.gamma):
        if g == 0:
            continue
        if stage not in aux:
            raise ValueError(f"gamma weight {g} given for stage {stage} but the model emitted no auxiliary mask for it")
        total = total + g * combined_loss(aux[stage], target, cfg)
    return total


def final_only_loss(output, target, cfg: LossConfig = LossConfig()) -> Tensor:
    return combined_loss(output.mask, target, cfg)


__all__ = ["BCE_EPS", "LossConfig", "bce_loss", "combined_loss", "dice_loss", "final_only_loss", "layer_wise_loss"]
