"""Timing comparison of the compiled and pure-numpy kernel backends."""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .proxy import ProxyParams, proxy_label, to_gray
from .synthetic import DomainSpec, synth_pair


def _time(fn, repeats):
    fn()  # warm-up call so compilation never lands in the measurement
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def run_bench(height=64, width=128, max_disp=32, repeats=5) -> list[dict]:
    """Time each hot kernel on both backends; returns one row per pair."""
    spec = DomainSpec(name="bench", kind="clean", severity=0.0, frames=1,
                      height=height, width=width)
    pair, _ = synth_pair(spec, 0, seed=0)
    gray_l = to_gray(pair.left)
    gray_r = to_gray(pair.right)
    params = ProxyParams(max_disp=max_disp)

    rows = []
    backends = [b for b in ("numpy", "numba") if b in kernels.available_backends()]

    def add(name, make_fn):
        row = {"kernel": name}
        for backend in backends:
            row[backend] = _time(make_fn(backend), repeats)
        if "numpy" in row and "numba" in row and row["numba"] > 0:
            row["speedup"] = row["numpy"] / row["numba"]
        rows.append(row)

    add("census_transform",
        lambda b: lambda: kernels.census_transform(gray_l, params.window, backend=b))
    codes_l = kernels.census_transform(gray_l, params.window)
    codes_r = kernels.census_transform(gray_r, params.window)
    add("hamming_cost_volume",
        lambda b: lambda: kernels.hamming_cost_volume(
            codes_l, codes_r, max_disp, backend=b))
    cost = kernels.hamming_cost_volume(codes_l, codes_r, max_disp)
    add("sgm_aggregate",
        lambda b: lambda: kernels.sgm_aggregate(cost, params.p1, params.p2,
                                                params.paths, backend=b))
    add("proxy_label",
        lambda b: lambda: proxy_label(pair, params, backend=b))
    return rows


def format_bench(rows) -> str:
    backends = [k for k in ("numpy", "numba") if k in rows[0]]
    header = ["kernel"] + [f"{b} [ms]" for b in backends]
    if "speedup" in rows[0]:
        header.append("speedup")
    lines = ["  ".join(f"{h:>20}" for h in header)]
    for row in rows:
        cells = [f"{row['kernel']:>20}"]
        cells += [f"{row[b]:>20.3f}" for b in backends]
        if "speedup" in row:
            cells.append(f"{row['speedup']:>20.1f}x")
        lines.append("  ".join(cells))
    return "\n".join(lines)
