"""Pure-numpy kernel implementations (fallback backend).

Must stay bit-identical to the numba versions: same census bit order, same
edge clamping, same integer arithmetic and summation order in SGM.
"""

from __future__ import annotations

import numpy as np


def census_transform(gray, window):
    """Census codes: bit b set when neighbor b is darker than the center.

    Neighbors are enumerated row-major over the window, center skipped;
    borders replicate the edge pixel.
    """
    h, w = gray.shape
    hw = window // 2
    padded = np.pad(gray, hw, mode="edge")
    codes = np.zeros((h, w), dtype=np.uint64)
    bit = 0
    for di in range(-hw, hw + 1):
        for dj in range(-hw, hw + 1):
            if di == 0 and dj == 0:
                continue
            neighbor = padded[hw + di:hw + di + h, hw + dj:hw + dj + w]
            codes |= (neighbor < gray).astype(np.uint64) << np.uint64(bit)
            bit += 1
    return codes


def hamming_cost_volume(ref, oth, max_disp, shift_dir, oob_cost):
    """Hamming distances ref(r,c) vs oth(r, c - shift_dir*d), (H,W,D) int32."""
    h, w = ref.shape
    vol = np.empty((h, w, max_disp), dtype=np.int32)
    for d in range(max_disp):
        off = shift_dir * d
        if off >= 0:
            x = ref[:, off:] ^ oth[:, :w - off] if off else ref ^ oth
            vol[:, off:, d] = np.bitwise_count(x).astype(np.int32)
            vol[:, :off, d] = oob_cost
        else:
            x = ref[:, :w + off] ^ oth[:, -off:]
            vol[:, :w + off, d] = np.bitwise_count(x).astype(np.int32)
            vol[:, w + off:, d] = oob_cost
    return vol


_BIG = np.int32(1 << 29)


def _transition(prev, p1, p2):
    """Vectorized SGM transition term over a (..., D) slab of path costs."""
    minp = prev.min(axis=-1, keepdims=True)
    up = np.full_like(prev, _BIG)
    up[..., 1:] = prev[..., :-1]
    dn = np.full_like(prev, _BIG)
    dn[..., :-1] = prev[..., 1:]
    cand = np.minimum(np.minimum(prev, up + p1),
                      np.minimum(dn + p1, minp + p2))
    return cand - minp


def sgm_path(cost, p1, p2, dr, dc):
    """One directional pass of the SGM recurrence, int32 in and out."""
    h, w, _ = cost.shape
    out = np.empty_like(cost)
    p1 = np.int32(p1)
    p2 = np.int32(p2)
    if dr == 0:
        cols = range(w) if dc > 0 else range(w - 1, -1, -1)
        prev = None
        for c in cols:
            line = cost[:, c, :].copy()
            if prev is not None:
                line += _transition(prev, p1, p2)
            out[:, c, :] = line
            prev = line
    else:
        rows = range(h) if dr > 0 else range(h - 1, -1, -1)
        prev = None
        for r in rows:
            line = cost[r].copy()
            if prev is not None:
                if dc == 0:
                    shifted = prev
                else:
                    # columns without a predecessor get an all-equal row,
                    # which contributes exactly zero through the transition
                    shifted = np.zeros_like(prev)
                    if dc > 0:
                        shifted[dc:] = prev[:-dc]
                    else:
                        shifted[:dc] = prev[-dc:]
                line += _transition(shifted, p1, p2)
            out[r] = line
            prev = out[r]
    return out


def sgm_aggregate(cost, p1, p2, dirs):
    agg = np.zeros_like(cost)
    for dr, dc in dirs:
        agg += sgm_path(cost, p1, p2, dr, dc)
    return agg
