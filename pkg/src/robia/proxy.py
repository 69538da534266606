"""Handcrafted pseudo-labels: SGM disparity plus left-right confidence masks.

Pipeline: census transform -> Hamming cost volume -> semi-global aggregation
-> winner-takes-all, run for both views; the left/right disparity agreement
gives a confidence c = exp(-|mismatch|), thresholded into the valid/invalid
mask partition that routes supervision downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .types import ConfidenceMap, DisparityMap, MaskPair, StereoPair


@dataclass
class ProxyParams:
    """SGM and masking knobs (standard literature defaults)."""

    max_disp: int = 32
    window: int = 5
    p1: int = 10
    p2: int = 120
    paths: int = 8
    epsilon: float = float(np.exp(-1.0))  # one-pixel LR mismatch still passes
    subpixel: bool = False

    def __post_init__(self):
        if self.max_disp < 1:
            raise ValueError(f"max_disp must be >= 1, got {self.max_disp}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


def to_gray(img):
    """Channel mean of an (H, W, 3) image, float32."""
    return img.mean(axis=2, dtype=np.float32)


def census_cost(pair: StereoPair, max_disp, window, backend=None):
    """Left-reference census Hamming cost volume (H, W, D)."""
    codes_l = kernels.census_transform(to_gray(pair.left), window, backend=backend)
    codes_r = kernels.census_transform(to_gray(pair.right), window, backend=backend)
    oob = window * window - 1
    return kernels.hamming_cost_volume(codes_l, codes_r, max_disp, shift_dir=1,
                                       oob_cost=oob, backend=backend)


def wta(aggregated, subpixel=False):
    """Winner-takes-all disparity; ties resolve to the smallest d."""
    d = aggregated.argmin(axis=2)
    disp = d.astype(np.float32)
    if subpixel:
        h, w, nd = aggregated.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        interior = (d > 0) & (d < nd - 1)
        dm = aggregated[rr, cc, np.maximum(d - 1, 0)].astype(np.float64)
        dp = aggregated[rr, cc, np.minimum(d + 1, nd - 1)].astype(np.float64)
        d0 = aggregated[rr, cc, d].astype(np.float64)
        denom = dm + dp - 2.0 * d0
        offset = np.where(interior & (denom > 0),
                          (dm - dp) / np.maximum(2.0 * denom, 1e-9), 0.0)
        disp = (disp + np.clip(offset, -0.5, 0.5)).astype(np.float32)
    return DisparityMap(disp)


def lr_confidence(d_left: DisparityMap, d_right: DisparityMap) -> ConfidenceMap:
    """c(p) = exp(-|dL(p) - dR(p - round(dL(p)))|), zero when out of bounds."""
    dl = d_left.data
    dr = d_right.data
    h, w = dl.shape
    rows = np.arange(h)[:, None]
    x = np.arange(w)[None, :] - np.rint(dl).astype(int)
    inb = (x >= 0) & (x < w)
    xc = np.clip(x, 0, w - 1)
    delta = np.abs(dl - dr[rows, xc])
    c = np.exp(-delta).astype(np.float32)
    c[~inb] = 0.0
    return ConfidenceMap(c)


def make_masks(confidence, epsilon) -> MaskPair:
    """Threshold confidence into the exact valid/invalid partition."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    c = confidence.c if isinstance(confidence, ConfidenceMap) else confidence
    valid = c >= epsilon
    return MaskPair(valid=valid, invalid=~valid, epsilon=epsilon)


def proxy_label(pair: StereoPair, params: ProxyParams, backend=None):
    """Full labeler: returns (D_proxy, masks, density).

    Deterministic in (pair, params); the right-view disparity reuses the
    same kernels with the views' roles swapped (shift_dir = -1).
    """
    gray_l = to_gray(pair.left)
    gray_r = to_gray(pair.right)
    codes_l = kernels.census_transform(gray_l, params.window, backend=backend)
    codes_r = kernels.census_transform(gray_r, params.window, backend=backend)
    oob = params.window * params.window - 1
    vol_l = kernels.hamming_cost_volume(codes_l, codes_r, params.max_disp,
                                        shift_dir=1, oob_cost=oob, backend=backend)
    vol_r = kernels.hamming_cost_volume(codes_r, codes_l, params.max_disp,
                                        shift_dir=-1, oob_cost=oob, backend=backend)
    agg_l = kernels.sgm_aggregate(vol_l, params.p1, params.p2, params.paths,
                                  backend=backend)
    agg_r = kernels.sgm_aggregate(vol_r, params.p1, params.p2, params.paths,
                                  backend=backend)
    d_l = wta(agg_l, params.subpixel)
    d_r = wta(agg_r, params.subpixel)
    conf = lr_confidence(d_l, d_r)
    masks = make_masks(conf, params.epsilon)
    label = DisparityMap(d_l.data, masks.valid.copy())
    return label, masks, masks.density
