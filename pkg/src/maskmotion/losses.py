"""Mask prediction objective: weighted dice + focal loss.

All functions accept either a single (H, W) prediction/target pair or a
batch (B, H, W) / (B, 1, H, W); batched inputs are averaged per sample
(dice) or per pixel (focal).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DICE_EPS = 1.0
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_focal: float = 1.0
    lambda_dice: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        for name in ("lambda_focal", "lambda_dice", "focal_gamma", "focal_alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def _check_pair(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def _flatten_batch(t: torch.Tensor) -> torch.Tensor:
    # (H,W) -> (1, H*W); (B,H,W) or (B,1,H,W) -> (B, H*W)
    if t.dim() == 2:
        return t.reshape(1, -1)
    return t.reshape(t.shape[0], -1)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Smoothed dice loss: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    _check_pair(pred, target)
    p = _flatten_batch(pred)
    t = _flatten_batch(target).to(p.dtype)
    inter = (p * t).sum(dim=1)
    denom = p.sum(dim=1) + t.sum(dim=1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def focal_loss(pred: torch.Tensor, target: torch.Tensor,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Focal loss -alpha_t * (1 - p_t)^gamma * log(p_t), averaged over all pixels.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    _check_pair(pred, target)
    p = _flatten_batch(pred).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = _flatten_batch(target).to(p.dtype)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def mask_loss(pred: torch.Tensor, target: torch.Tensor,
              weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Combined objective: lambda_focal * focal + lambda_dice * dice."""
    return (weights.lambda_focal * focal_loss(pred, target, weights.focal_gamma, weights.focal_alpha)
            + weights.lambda_dice * dice_loss(pred, target))
