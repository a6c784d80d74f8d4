"""Loss values with analytic gradients w.r.t. the network outputs.

These exist for verification, not training: every gradient here is checked
against central finite differences in the test suite. Losses reduce by
mean over the masked pixels (and channels, for the regression loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMask, ShapeMismatch
from .ops import check_chw, softmax_channels


@dataclass(frozen=True)
class LossConfig:
    """Second-stage loss weighting: classification vs box regression."""

    class_weight: float = 5.0
    regression_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.class_weight <= 0 or self.regression_weight <= 0:
            raise ValueError("loss weights must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal gamma must be >= 0")


def _check_target(logits, target, mask):
    logits = check_chw(logits, "logits")
    target = np.asarray(target)
    if target.shape != logits.shape[1:]:
        raise ShapeMismatch(
            f"target {target.shape} does not match logits {logits.shape[1:]}")
    if mask is None:
        mask = np.ones(target.shape, bool)
    else:
        mask = np.asarray(mask, bool)
        if mask.shape != target.shape:
            raise ShapeMismatch(
                f"mask {mask.shape} does not match target {target.shape}")
    if not mask.any():
        raise EmptyMask("loss mask selects no pixels")
    if target[mask].max() >= logits.shape[0] or target[mask].min() < 0:
        raise ValueError("target class id out of range")
    return logits, target, mask


def cross_entropy(logits: np.ndarray, target: np.ndarray,
                  mask: np.ndarray | None = None):
    """Mean -log softmax(logits)[target] over masked pixels.

    Returns (loss, grad) with grad = d loss / d logits, zero off-mask.
    """
    logits, target, mask = _check_target(logits, target, mask)
    p = softmax_channels(logits).astype(np.float64)
    n = int(mask.sum())
    hh, ww = np.nonzero(mask)
    tt = target[hh, ww]
    pt = p[tt, hh, ww]
    loss = float(-np.log(pt).sum() / n)

    grad = np.zeros_like(p)
    grad[:, hh, ww] = p[:, hh, ww]
    grad[tt, hh, ww] -= 1.0
    grad /= n
    return loss, grad.astype(np.float32)


def focal_loss(logits: np.ndarray, target: np.ndarray, cfg: LossConfig,
               mask: np.ndarray | None = None):
    """Mean -alpha * (1 - p_t)^gamma * log p_t with p from channel softmax.

    With gamma=0 and alpha=1 this reduces exactly to cross_entropy.
    """
    logits, target, mask = _check_target(logits, target, mask)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    p = softmax_channels(logits).astype(np.float64)
    n = int(mask.sum())
    hh, ww = np.nonzero(mask)
    tt = target[hh, ww]
    pt = p[tt, hh, ww]
    one_m = 1.0 - pt
    loss = float(-a * (one_m ** g * np.log(pt)).sum() / n)

    # dL/dp_t, then chain through softmax: dp_t/dz_j = p_t (1[j=t] - p_j)
    if g == 0.0:
        dldpt = -a / pt
    else:
        dldpt = -a * (-g * one_m ** (g - 1.0) * np.log(pt) + one_m ** g / pt)
    grad = np.zeros_like(p)
    coeff = dldpt * pt / n
    grad[:, hh, ww] = -coeff * p[:, hh, ww]
    grad[tt, hh, ww] += coeff
    return loss, grad.astype(np.float32)


def l1_loss(pred: np.ndarray, target: np.ndarray,
            mask: np.ndarray | None = None):
    """Mean absolute error over masked cells (all channels of each pixel).

    Subgradient is 0 where the residual is exactly zero.
    """
    pred = check_chw(pred, "pred")
    target = check_chw(target, "target")
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[1:], bool)
    else:
        mask = np.asarray(mask, bool)
        if mask.shape != pred.shape[1:]:
            raise ShapeMismatch(
                f"mask {mask.shape} does not match spatial dims {pred.shape[1:]}")
    if not mask.any():
        raise EmptyMask("loss mask selects no pixels")
    n = int(mask.sum()) * pred.shape[0]
    resid = (pred.astype(np.float64) - target.astype(np.float64)) * mask
    loss = float(np.abs(resid).sum() / n)
    grad = (np.sign(resid) / n).astype(np.float32)
    return loss, grad


def detection_loss(class_logits: np.ndarray, class_target: np.ndarray,
                   box_pred: np.ndarray, box_target: np.ndarray,
                   box_mask: np.ndarray, cfg: LossConfig | None = None):
    """Weighted sum of the focal classification and L1 regression terms.

    Returns (loss, class_grad, box_grad). The classification term covers
    every cell; the regression term only the cells in box_mask.
    """
    if cfg is None:
        cfg = LossConfig()
    f_loss, f_grad = focal_loss(class_logits, class_target, cfg)
    r_loss, r_grad = l1_loss(box_pred, box_target, box_mask)
    loss = cfg.class_weight * f_loss + cfg.regression_weight * r_loss
    return (loss, (cfg.class_weight * f_grad).astype(np.float32),
            (cfg.regression_weight * r_grad).astype(np.float32))
