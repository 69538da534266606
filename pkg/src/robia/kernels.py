"""Kernel dispatch: numba-jitted hot loops with a pure-numpy fallback.

Backend selection, checked per call:
  * explicit ``backend=`` argument wins,
  * else the ``ROBIA_NUMBA`` env var ("0"/"false"/"off" forces numpy,
    "1"/"true"/"on" requires numba),
  * else numba when importable, numpy otherwise.

Both backends are bit-identical; ``robia bench`` measures the gap.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_numpy as _np_impl

try:
    from . import _kernels_numba as _nb_impl
except ImportError:  # pragma: no cover - depends on environment
    _nb_impl = None

DIRECTIONS = {
    "left": (0, 1),
    "right": (0, -1),
    "up": (1, 0),
    "down": (-1, 0),
    "up_left": (1, 1),
    "up_right": (1, -1),
    "down_left": (-1, 1),
    "down_right": (-1, -1),
}
_PATHS_4 = ["left", "right", "up", "down"]
_PATHS_8 = _PATHS_4 + ["up_left", "up_right", "down_left", "down_right"]


def available_backends():
    return ["numpy", "numba"] if _nb_impl is not None else ["numpy"]


def resolve_backend(backend):
    """Pick the backend for this call (explicit > env flag > auto)."""
    if backend is None:
        flag = os.environ.get("ROBIA_NUMBA", "").strip().lower()
        if flag in ("0", "false", "off"):
            return "numpy"
        if flag in ("1", "true", "on"):
            backend = "numba"
        else:
            return "numba" if _nb_impl is not None else "numpy"
    if backend == "numba":
        if _nb_impl is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        return "numba"
    if backend == "numpy":
        return "numpy"
    raise ValueError(f"unknown kernel backend {backend!r}")


def _impl(backend):
    return _nb_impl if resolve_backend(backend) == "numba" else _np_impl


def census_transform(gray, window, backend=None):
    """Census codes of a grayscale image; see the backend modules."""
    gray = np.ascontiguousarray(gray, dtype=np.float32)
    if window % 2 == 0 or window < 3:
        raise ValueError(f"census window must be odd and >= 3, got {window}")
    if window > min(gray.shape):
        raise ValueError(f"census window {window} exceeds image size {gray.shape}")
    return _impl(backend).census_transform(gray, window)


def hamming_cost_volume(ref, oth, max_disp, shift_dir=1, oob_cost=24, backend=None):
    """Matching cost volume (H, W, D) of census Hamming distances.

    ``shift_dir=1`` samples the other view at c - d (left as reference),
    ``shift_dir=-1`` at c + d (right as reference). Out-of-bounds samples
    cost ``oob_cost`` (the maximal Hamming distance for the census window).
    """
    if max_disp < 1:
        raise ValueError(f"max_disp must be >= 1, got {max_disp}")
    if shift_dir not in (1, -1):
        raise ValueError(f"shift_dir must be +1 or -1, got {shift_dir}")
    return _impl(backend).hamming_cost_volume(ref, oth, int(max_disp),
                                              int(shift_dir), int(oob_cost))


def path_directions(paths):
    """Normalize a path spec (4, 8, or a list of names) to direction vectors."""
    if isinstance(paths, int):
        if paths == 4:
            names = _PATHS_4
        elif paths == 8:
            names = _PATHS_8
        else:
            raise ValueError(f"path count must be 4 or 8, got {paths}")
    else:
        names = list(paths)
        unknown = [n for n in names if n not in DIRECTIONS]
        if unknown:
            raise ValueError(f"unknown path names: {unknown}")
    return names


def sgm_aggregate(cost, p1, p2, paths=8, backend=None):
    """Sum of directional SGM passes over the selected paths.

    Standard recurrence per path:
    L(p,d) = C(p,d) + min(L(q,d), L(q,d+-1)+P1, min_k L(q,k)+P2) - min_k L(q,k)
    with q the predecessor pixel along the path. Integer arithmetic
    throughout; summation order is fixed for determinism.
    """
    if not (0 <= p1 <= p2):
        raise ValueError(f"need P2 >= P1 >= 0, got P1={p1}, P2={p2}")
    cost = np.ascontiguousarray(cost, dtype=np.int32)
    if cost.ndim != 3:
        raise ValueError(f"cost volume must be (H, W, D), got {cost.shape}")
    names = path_directions(paths)
    dirs = np.array([DIRECTIONS[n] for n in names], dtype=np.int64)
    backend = resolve_backend(backend)
    if backend == "numba":
        return _nb_impl.sgm_aggregate(cost, np.int32(p1), np.int32(p2), dirs)
    return _np_impl.sgm_aggregate(cost, int(p1), int(p2), dirs)
