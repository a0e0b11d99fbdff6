"""Hard segmentation metrics on 2D binary masks: Dice and HD95.

HD95 conventions:

* boundary = mask pixels with at least one 4-neighbour outside the mask
  (pixels on the image border count as touching the outside);
* distances are Euclidean between boundary pixel centres, scaled by spacing;
* percentile = nearest-rank ceiling, i.e. the ``ceil(0.95 n)``-th smallest value;
* both masks empty -> 0.0, exactly one empty -> ``None`` ("undefined").
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

_CROSS2D = ndimage.generate_binary_structure(2, 1)


class MetricError(ValueError):
    pass


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, _CROSS2D, border_value=0)
    return mask & ~eroded


def nearest_rank(values, q: float = 95.0) -> float:
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise MetricError("percentile of an empty set")
    rank = max(1, math.ceil(q / 100.0 * values.size))
    return float(values[rank - 1])


def _directed(src_boundary, dst_boundary, spacing):
    # distance from every pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst_boundary, sampling=spacing)
    return dist[src_boundary]


def hd95(pred, gt, spacing=(1.0, 1.0)) -> float | None:
    """Symmetric 95th-percentile Hausdorff distance, or ``None`` when exactly one mask is empty."""
    pred, gt = _pair(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return None
    bp, bg = boundary(pred), boundary(gt)
    spacing = tuple(float(s) for s in spacing)
    return max(
        nearest_rank(_directed(bp, bg, spacing)),
        nearest_rank(_directed(bg, bp, spacing)),
    )


def hausdorff(pred, gt, spacing=(1.0, 1.0)) -> float | None:
    """Classical (100th percentile) boundary Hausdorff distance."""
    pred, gt = _pair(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return None
    bp, bg = boundary(pred), boundary(gt)
    spacing = tuple(float(s) for s in spacing)
    return float(max(_directed(bp, bg, spacing).max(), _directed(bg, bp, spacing).max()))
