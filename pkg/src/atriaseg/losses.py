"""Differentiable training losses on ``(B, 4, H, W)`` logits and ``(B, H, W)`` labels."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np
import torch
from scipy import ndimage
from torch.nn import functional as F

FOREGROUND = (1, 2, 3)
DICE_EPS = 1e-5
POWER = 16
# pixel-weight regulariser in the power-mean denominator
POWER_MEAN_KAPPA = 1.0
# keeps the root differentiable at 0; offset DELTA**(1/POWER) ~ 3e-3 px
POWER_MEAN_DELTA = 1e-40
PROB_FLOOR = 0.05


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_ce: float
    w_dice: float
    w_hd: float

    def __post_init__(self):
        if min(astuple(self)) < 0:
            raise LossError(f"loss weights must be non-negative, got {astuple(self)}")
        if sum(astuple(self)) <= 0:
            raise LossError("loss weights must not all be zero")

    def to_dict(self):
        return {"w_ce": self.w_ce, "w_dice": self.w_dice, "w_hd": self.w_hd}


SUBMODEL_WEIGHTS = LossWeights(0.5, 0.5, 0.0)
ENSEMBLE_WEIGHTS = LossWeights(0.2, 0.4, 0.4)


def _check(logits: torch.Tensor, labels: torch.Tensor):
    if logits.ndim != 4 or labels.ndim != 3:
        raise LossError(f"expected logits (B,C,H,W) and labels (B,H,W), got {tuple(logits.shape)}, {tuple(labels.shape)}")
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise LossError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} are not aligned")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check(logits, labels)
    return F.cross_entropy(logits, labels.long())


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - mean foreground soft Dice; sums run over the whole batch."""
    _check(logits, labels)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels.long(), logits.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    fg = list(FOREGROUND)
    p, g = probs[:, fg], onehot[:, fg]
    inter = (p * g).sum(dim=(0, 2, 3))
    denom = p.sum(dim=(0, 2, 3)) + g.sum(dim=(0, 2, 3))
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def _distance_to(mask: np.ndarray, spacing) -> np.ndarray:
    return ndimage.distance_transform_edt(~mask, sampling=spacing)


def _hard_boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask, ndimage.generate_binary_structure(2, 1), border_value=0)


def soft_boundary(probs: torch.Tensor) -> torch.Tensor:
    """``p - erode(p)`` with a 4-neighbour min filter; outside the frame counts as 0.

    Equals the metric boundary exactly when ``probs`` is a 0/1 mask.
    """
    padded = F.pad(probs[None, None], (1, 1, 1, 1))[0, 0]
    neighbours = torch.stack([
        probs,
        padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:],
    ])
    return probs - neighbours.min(dim=0).values


def image_diagonal(shape, spacing=(1.0, 1.0)) -> float:
    return math.hypot(shape[0] * spacing[0], shape[1] * spacing[1])


def soft_hd95(probs: torch.Tensor, gt, spacing=(1.0, 1.0)) -> torch.Tensor | None:
    """Smooth HD95 estimate for one class on one image; ``None`` if one side is empty.

    The soft predicted boundary is valued by its distance to the ground-truth
    boundary; the ground-truth boundary is valued by its distance to the
    boundary of the thresholded prediction.  Boundary points already matched
    (distance 0) are dropped and the union of the remaining values is reduced
    with a weighted power mean, which sits between the mean and the max and
    stands in for the non-differentiable percentile.  Probabilities below
    ``PROB_FLOOR`` are zeroed first so far-away softmax tails cannot dominate.
    Computed in float64; the result has the dtype of ``probs``.
    """
    if probs.ndim != 2:
        raise LossError(f"probs must be 2D, got shape {tuple(probs.shape)}")
    gt = np.asarray(gt, dtype=bool)
    if gt.shape != tuple(probs.shape):
        raise LossError(f"probs {tuple(probs.shape)} and gt {gt.shape} are not aligned")
    with torch.no_grad():
        lo, hi = probs.min().item(), probs.max().item()
    if lo < 0.0 or hi > 1.0:
        raise LossError(f"probabilities must lie in [0, 1], got range [{lo}, {hi}]")
    hard = probs.detach().cpu().numpy() >= 0.5
    if not gt.any() and not hard.any():
        return probs.sum() * 0.0
    if gt.any() != hard.any():
        return None
    spacing = tuple(float(s) for s in spacing)
    gt_edge = _hard_boundary(gt)
    to_gt_edge = torch.as_tensor(_distance_to(gt_edge, spacing), dtype=torch.float64, device=probs.device)
    to_pred_edge = _distance_to(_hard_boundary(hard), spacing)[gt_edge]
    to_pred_edge = to_pred_edge[to_pred_edge > 0]

    sharp = ((probs.double() - PROB_FLOOR) / (1.0 - 2.0 * PROB_FLOOR)).clamp(0.0, 1.0)
    w_pred = soft_boundary(sharp) * (to_gt_edge > 0)
    num = (w_pred * to_gt_edge**POWER).sum() + float((to_pred_edge**POWER).sum())
    den = w_pred.sum() + float(to_pred_edge.size) + POWER_MEAN_KAPPA
    out = (num / den + POWER_MEAN_DELTA) ** (1.0 / POWER) - POWER_MEAN_DELTA ** (1.0 / POWER)
    return out.to(probs.dtype)


def soft_hd95_surrogate(probs: torch.Tensor, gt, spacing=(1.0, 1.0)) -> torch.Tensor:
    """``log(1 + soft_hd95)``; one-side-empty contributes ``log(1 + image diagonal)``."""
    s = soft_hd95(probs, gt, spacing)
    if s is None:
        return probs.sum() * 0.0 + math.log1p(image_diagonal(probs.shape, spacing))
    return torch.log1p(s)


def hd_loss(logits: torch.Tensor, labels: torch.Tensor, spacing=(1.0, 1.0)) -> torch.Tensor:
    """Mean surrogate over foreground classes and batch images."""
    _check(logits, labels)
    probs = torch.softmax(logits, dim=1)
    lab = labels.detach().cpu().numpy()
    terms = [
        soft_hd95_surrogate(probs[b, c], lab[b] == c, spacing)
        for b in range(logits.shape[0])
        for c in FOREGROUND
    ]
    return torch.stack(terms).mean()


def joint_loss(logits: torch.Tensor, labels: torch.Tensor, weights: LossWeights, spacing=(1.0, 1.0)) -> torch.Tensor:
    """Weighted CE + soft Dice + log-HD95 surrogate; zero-weight terms are skipped."""
    _check(logits, labels)
    total = None
    for w, fn in (
        (weights.w_ce, lambda: cross_entropy(logits, labels)),
        (weights.w_dice, lambda: soft_dice_loss(logits, labels)),
        (weights.w_hd, lambda: hd_loss(logits, labels, spacing)),
    ):
        if w == 0:
            continue
        term = w * fn()
        total = term if total is None else total + term
    return total
