"""Numba-jitted kernel implementations (default backend when importable).

Mirrors _kernels_numpy bit-for-bit: same census bit order and edge clamp,
same integer SGM recurrence, same path summation order.
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True)
def census_transform(gray, window):
    h, w = gray.shape
    hw = window // 2
    codes = np.zeros((h, w), dtype=np.uint64)
    one = np.uint64(1)
    for r in range(h):
        for c in range(w):
            center = gray[r, c]
            code = np.uint64(0)
            bit = np.uint64(0)
            for di in range(-hw, hw + 1):
                for dj in range(-hw, hw + 1):
                    if di == 0 and dj == 0:
                        continue
                    rr = min(max(r + di, 0), h - 1)
                    cc = min(max(c + dj, 0), w - 1)
                    if gray[rr, cc] < center:
                        code |= one << bit
                    bit += one
            codes[r, c] = code
    return codes


@nb.njit(cache=True)
def hamming_cost_volume(ref, oth, max_disp, shift_dir, oob_cost):
    h, w = ref.shape
    vol = np.empty((h, w, max_disp), dtype=np.int32)
    zero = np.uint64(0)
    one = np.uint64(1)
    for r in range(h):
        for c in range(w):
            for d in range(max_disp):
                cc = c - shift_dir * d
                if cc < 0 or cc >= w:
                    vol[r, c, d] = oob_cost
                else:
                    v = ref[r, c] ^ oth[r, cc]
                    cnt = 0
                    while v != zero:
                        v &= v - one
                        cnt += 1
                    vol[r, c, d] = cnt
    return vol


@nb.njit(cache=True)
def sgm_aggregate(cost, p1, p2, dirs):
    h, w, nd = cost.shape
    agg = np.zeros((h, w, nd), dtype=np.int32)
    lbuf = np.empty((h, w, nd), dtype=np.int32)
    for k in range(dirs.shape[0]):
        dr = dirs[k, 0]
        dc = dirs[k, 1]
        if dr >= 0:
            r0, r1, rs = 0, h, 1
        else:
            r0, r1, rs = h - 1, -1, -1
        if dc >= 0:
            c0, c1, cs = 0, w, 1
        else:
            c0, c1, cs = w - 1, -1, -1
        for r in range(r0, r1, rs):
            for c in range(c0, c1, cs):
                pr = r - dr
                pc = c - dc
                if 0 <= pr < h and 0 <= pc < w:
                    minp = lbuf[pr, pc, 0]
                    for d in range(1, nd):
                        if lbuf[pr, pc, d] < minp:
                            minp = lbuf[pr, pc, d]
                    for d in range(nd):
                        best = lbuf[pr, pc, d]
                        if d > 0 and lbuf[pr, pc, d - 1] + p1 < best:
                            best = lbuf[pr, pc, d - 1] + p1
                        if d < nd - 1 and lbuf[pr, pc, d + 1] + p1 < best:
                            best = lbuf[pr, pc, d + 1] + p1
                        if minp + p2 < best:
                            best = minp + p2
                        lbuf[r, c, d] = cost[r, c, d] + best - minp
                else:
                    for d in range(nd):
                        lbuf[r, c, d] = cost[r, c, d]
        for r in range(h):
            for c in range(w):
                for d in range(nd):
                    agg[r, c, d] += lbuf[r, c, d]
    return agg
