"""Disparity metrics: EPE, D1-all, and region-split variants.

Every metric averages over the ground-truth-valid pixel set only. An empty
averaging set yields None (an explicit undefined marker, never a silent 0).
"""

from __future__ import annotations

import numpy as np

from .types import DisparityMap


def _data(x):
    return x.data if isinstance(x, DisparityMap) else np.asarray(x)


def _gt_parts(gt):
    if isinstance(gt, DisparityMap):
        return gt.data, gt.valid
    gt = np.asarray(gt)
    return gt, np.ones(gt.shape, dtype=bool)


def epe(pred, gt, extra_mask=None):
    """Mean absolute disparity error over gt-valid pixels (optionally masked)."""
    p = _data(pred)
    g, valid = _gt_parts(gt)
    if extra_mask is not None:
        valid = valid & extra_mask
    if not valid.any():
        return None
    return float(np.abs(p[valid] - g[valid]).mean())


def d1_all(pred, gt, extra_mask=None):
    """Fraction of gt-valid pixels with error > 3 px AND > 5% of gt."""
    p = _data(pred)
    g, valid = _gt_parts(gt)
    if extra_mask is not None:
        valid = valid & extra_mask
    if not valid.any():
        return None
    err = np.abs(p[valid] - g[valid])
    outlier = (err > 3.0) & (err > 0.05 * g[valid])
    return float(outlier.mean())


def region_split_metrics(pred, gt, masks):
    """((epe, d1) on M_valid ∩ gt-valid, (epe, d1) on M_invalid ∩ gt-valid)."""
    valid_part = (epe(pred, gt, masks.valid), d1_all(pred, gt, masks.valid))
    invalid_part = (epe(pred, gt, masks.invalid), d1_all(pred, gt, masks.invalid))
    return valid_part, invalid_part
