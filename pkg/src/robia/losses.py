"""Adaptation losses: masked smooth-L1 terms and the photometric baseline.

The image partitions into proxy-supervised (M_valid) and teacher-supervised
(M_invalid) pixels; each loss is a masked MEAN so the weight between the two
terms does not drift with mask density. Targets are constants: no gradient
reaches the proxy labels or the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossConfig:
    """Weights and switches for the total adaptation loss."""

    lambda_: float = 0.1
    smooth_l1_beta: float = 1.0
    photometric: str = "off"
    alpha: float = 0.85

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        if self.photometric not in ("off", "on"):
            raise ValueError(f"photometric must be 'off' or 'on', got {self.photometric!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def smooth_l1(x, beta=1.0):
    """Elementwise Huber map: 0.5 x^2/beta below beta, |x| - beta/2 above."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if isinstance(x, ad.Tensor):
        return ad.smooth_l1(x, beta)
    x = np.asarray(x)
    absx = np.abs(x)
    return np.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)


def masked_mean(loss_map, mask):
    """Mean of an autodiff map over a boolean mask; empty mask -> constant 0."""
    n = int(mask.sum())
    if n == 0:
        return ad.Tensor(np.zeros((), dtype=loss_map.dtype))
    weights = mask.astype(loss_map.dtype)
    return ad.mul(ad.sum_(ad.mul(loss_map, ad.Tensor(weights))), 1.0 / n)


def loss_proxy(d_pred, d_proxy, m_valid, beta=1.0):
    """Masked mean of smooth_l1(D_proxy - D_pred) over the valid partition."""
    target = ad.Tensor(np.asarray(d_proxy, dtype=d_pred.dtype))
    return masked_mean(smooth_l1(ad.sub(target, d_pred), beta), m_valid)


def loss_teacher(d_pred, d_teacher, m_invalid, beta=1.0):
    """Masked mean of smooth_l1(D_teacher - D_pred) over the invalid partition."""
    target = ad.Tensor(np.asarray(d_teacher, dtype=d_pred.dtype))
    return masked_mean(smooth_l1(ad.sub(target, d_pred), beta), m_invalid)


def total_loss(d_pred, d_proxy, d_teacher, masks, cfg: LossConfig):
    """L = L_proxy + lambda * L_teacher."""
    lp = loss_proxy(d_pred, d_proxy, masks.valid, cfg.smooth_l1_beta)
    lt = loss_teacher(d_pred, d_teacher, masks.invalid, cfg.smooth_l1_beta)
    return ad.add(lp, ad.mul(lt, cfg.lambda_))


# -- photometric baseline ------------------------------------------------------


def _avg_pool3(x):
    """3x3 box filter without padding: (C,H,W) -> (C,H-2,W-2)."""
    acc = None
    h, w = x.shape[1], x.shape[2]
    for i in range(3):
        for j in range(3):
            piece = x[:, i:i + h - 2, j:j + w - 2]
            acc = piece if acc is None else ad.add(acc, piece)
    return ad.mul(acc, 1.0 / 9.0)


def _ssim_map(x, y, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-pixel SSIM over 3x3 box windows (interior crop)."""
    mu_x = _avg_pool3(x)
    mu_y = _avg_pool3(y)
    sigma_x = ad.sub(_avg_pool3(ad.mul(x, x)), ad.mul(mu_x, mu_x))
    sigma_y = ad.sub(_avg_pool3(ad.mul(y, y)), ad.mul(mu_y, mu_y))
    sigma_xy = ad.sub(_avg_pool3(ad.mul(x, y)), ad.mul(mu_x, mu_y))
    num = ad.mul(ad.add(ad.mul(ad.mul(mu_x, mu_y), 2.0), c1),
                 ad.add(ad.mul(sigma_xy, 2.0), c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_x, mu_x), ad.mul(mu_y, mu_y)), c1),
                 ad.add(ad.add(sigma_x, sigma_y), c2))
    return ad.div(num, den)


def photometric_loss(pair, d_pred, alpha=0.85):
    """Self-supervised reconstruction: alpha (1-SSIM)/2 + (1-alpha) L1.

    The right view is warped to the left by the predicted disparity; both
    terms are averaged over in-bounds pixels of the 3x3-interior crop.
    """
    dtype = d_pred.dtype
    left = ad.Tensor(np.ascontiguousarray(pair.left.transpose(2, 0, 1), dtype=dtype))
    right = ad.Tensor(np.ascontiguousarray(pair.right.transpose(2, 0, 1), dtype=dtype))
    warped, inb = ad.warp_horizontal(right, d_pred)
    # count a pixel only when its whole 3x3 SSIM window is in bounds, so the
    # zeroed out-of-bounds samples cannot leak into either term
    h, w = inb.shape
    interior = np.ones((h - 2, w - 2), dtype=bool)
    for i in range(3):
        for j in range(3):
            interior &= inb[i:i + h - 2, j:j + w - 2]
    l1_map = ad.mean_(ad.abs_(ad.sub(left, warped)), axis=0)[1:-1, 1:-1]
    ssim = ad.mean_(_ssim_map(left, warped), axis=0)
    ssim_term = ad.clip(ad.mul(ad.sub(ad.Tensor(np.ones((), dtype=dtype)), ssim), 0.5),
                        0.0, 1.0)
    mixed = ad.add(ad.mul(ssim_term, alpha), ad.mul(l1_map, 1.0 - alpha))
    return masked_mean(mixed, interior)
