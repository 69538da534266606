"""Procedural stereo frames with exact ground truth.

Scenes are stacks of textured planes (one full-frame background plus a few
rectangles), each carrying a linear disparity field

    d_i(r, c) = a_i + b_i (c - W/2) + e_i (r - H/2).

Textures are value noise evaluated at continuous coordinates, so the right
view is rendered analytically: for right column x, plane i's left coordinate
solves c - d_i(r, c) = x in closed form, and the texture is sampled there
exactly. Visibility is argmax of disparity among covering planes, which also
gives exact occlusion masks for the ground truth.

Corruptions (night / rain / fog) are deterministic in (domain, frame, seed);
severity 0 is a bit-exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import DisparityMap, StereoPair

CORRUPTION_KINDS = ("clean", "night", "rain", "fog")
_KIND_ID = {k: i for i, k in enumerate(CORRUPTION_KINDS)}


@dataclass
class DomainSpec:
    """One domain of a sequence: corruption kind, severity, frame count."""

    name: str
    kind: str = "clean"
    severity: float = 0.0
    frames: int = 60
    height: int = 64
    width: int = 128

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; "
                             f"expected one of {CORRUPTION_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


class _ValueNoise:
    """Bilinear value noise on a random lattice, sampled at continuous coords."""

    def __init__(self, rng, cell, shape):
        h, w = shape
        gh = int(np.ceil(h / cell)) + 3
        gw = int(np.ceil((w + 40) / cell)) + 3  # margin: right view samples past W
        self.cell = cell
        self.grid = rng.random((gh, gw))

    def sample(self, r, x):
        gr = np.clip(r / self.cell + 1.0, 0.0, self.grid.shape[0] - 1.001)
        gx = np.clip(x / self.cell + 1.0, 0.0, self.grid.shape[1] - 1.001)
        r0 = np.floor(gr).astype(int)
        x0 = np.floor(gx).astype(int)
        fr = gr - r0
        fx = gx - x0
        g = self.grid
        top = g[r0, x0] * (1 - fx) + g[r0, x0 + 1] * fx
        bot = g[r0 + 1, x0] * (1 - fx) + g[r0 + 1, x0 + 1] * fx
        return top * (1 - fr) + bot * fr


class _Plane:
    """A textured rectangle with a linear disparity field."""

    def __init__(self, rng, shape, rect, disp_params):
        self.r0, self.r1, self.c0, self.c1 = rect
        self.a, self.b, self.e = disp_params
        self.h, self.w = shape
        self.noise_lo = _ValueNoise(rng, 14.0, shape)
        self.noise_hi = _ValueNoise(rng, 5.0, shape)
        self.base = rng.uniform(0.25, 0.75)
        self.tint = rng.uniform(0.8, 1.0, size=3)

    def disparity(self, r, c):
        return (self.a + self.b * (c - self.w / 2.0) + self.e * (r - self.h / 2.0))

    def left_coord(self, r, x):
        """Left column whose content projects to right column x."""
        return ((x + self.a - self.b * self.w / 2.0
                 + self.e * (r - self.h / 2.0)) / (1.0 - self.b))

    def covers(self, r, c):
        return ((r >= self.r0) & (r < self.r1) & (c >= self.c0) & (c < self.c1))

    def albedo(self, r, c):
        tex = (self.base + 0.30 * (self.noise_lo.sample(r, c) - 0.5)
               + 0.18 * (self.noise_hi.sample(r, c) - 0.5))
        return np.clip(tex, 0.05, 0.95)


def _build_scene(rng, h, w):
    planes = []
    # background plane: near-fronto-parallel, covers everything
    bg_disp = (rng.uniform(2.0, 5.0), rng.uniform(-0.008, 0.008),
               rng.uniform(-0.008, 0.008))
    planes.append(_Plane(rng, (h, w), (0, h, 0, w), bg_disp))
    for _ in range(int(rng.integers(3, 6))):
        rh = int(rng.integers(h // 5, h // 2))
        rw = int(rng.integers(w // 6, w // 2))
        r0 = int(rng.integers(0, h - rh))
        c0 = int(rng.integers(0, w - rw))
        disp = (rng.uniform(6.0, 22.0), rng.uniform(-0.03, 0.03),
                rng.uniform(-0.03, 0.03))
        planes.append(_Plane(rng, (h, w), (r0, r0 + rh, c0, c0 + rw), disp))
    return planes


def _visible_index(covers_per_plane, d_per_plane):
    """Argmax of disparity over covering planes (nearest surface wins)."""
    scores = np.where(covers_per_plane, d_per_plane, -np.inf)
    return scores.argmax(axis=0), scores.max(axis=0)


def _render(planes, h, w):
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")

    # left view: per-pixel visibility by max disparity
    d_all = np.stack([p.disparity(rr, cc) for p in planes])
    cov_all = np.stack([p.covers(rr, cc) for p in planes])
    vis_l, gt = _visible_index(cov_all, d_all)

    albedo_l = np.zeros((h, w))
    tint_l = np.zeros((h, w, 3))
    for i, p in enumerate(planes):
        sel = vis_l == i
        if sel.any():
            albedo_l[sel] = p.albedo(rr[sel], cc[sel])
            tint_l[sel] = p.tint

    # right view: analytic inverse warp per plane
    c_r = np.stack([p.left_coord(rr, cc) for p in planes])
    cov_r = np.stack([p.covers(rr, c_r[i]) for i, p in enumerate(planes)])
    d_r = c_r - cc  # disparity of plane i's content at right column c
    vis_r, _ = _visible_index(cov_r, d_r)

    albedo_r = np.zeros((h, w))
    tint_r = np.zeros((h, w, 3))
    for i, p in enumerate(planes):
        sel = vis_r == i
        if sel.any():
            albedo_r[sel] = p.albedo(rr[sel], c_r[i][sel])
            tint_r[sel] = p.tint

    # occlusion: the left pixel is valid iff its projected right-view column
    # is in frame and the right view sees the same plane there
    x_proj = cc - gt
    cx_all = np.stack([p.left_coord(rr, x_proj) for p in planes])
    covx = np.stack([p.covers(rr, cx_all[i]) for i, p in enumerate(planes)])
    dx_all = cx_all - x_proj
    vis_x, _ = _visible_index(covx, dx_all)
    valid = (x_proj >= 0.0) & (vis_x == vis_l)

    left = albedo_l[:, :, None] * tint_l
    right = albedo_r[:, :, None] * tint_r
    return (left.astype(np.float32), right.astype(np.float32),
            gt.astype(np.float32), valid)


# -- corruptions ----------------------------------------------------------------


def _corrupt_night(img, s, rng):
    gain = 1.0 - 0.65 * s
    gamma = 1.0 + 1.6 * s
    out = np.power(np.clip(img, 0.0, 1.0), gamma) * gain
    out = out + rng.normal(0.0, 0.06 * s, size=img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _corrupt_rain(img, s, rng):
    h, w, _ = img.shape
    out = (img - 0.5) * (1.0 - 0.35 * s) + 0.5
    n_streaks = int(round(10 + 70 * s))
    for _ in range(n_streaks):
        r0 = rng.uniform(-5, h - 1)
        c0 = rng.uniform(0, w - 1)
        length = rng.uniform(5.0, 12.0)
        slope = rng.uniform(-0.35, 0.35)  # mostly vertical streaks
        bright = rng.uniform(0.25, 0.5) * (0.4 + 0.6 * s)
        t = np.arange(0.0, length, 0.5)
        rr = np.clip(np.round(r0 + t).astype(int), 0, h - 1)
        cc = np.clip(np.round(c0 + slope * t).astype(int), 0, w - 1)
        out[rr, cc] += bright
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _corrupt_fog(img, s, rng, field):
    w = s * (0.30 + 0.50 * field)
    out = img * (1.0 - w[:, :, None]) + 0.8 * w[:, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_corruption(pair, kind, severity, rng_key):
    """Corrupt both views; severity 0 is a bit-exact identity."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {severity}")
    if kind == "clean" or severity == 0.0:
        return pair
    rng = np.random.default_rng(rng_key)
    if kind == "night":
        left = _corrupt_night(pair.left, severity, rng)
        right = _corrupt_night(pair.right, severity, rng)
    elif kind == "rain":
        left = _corrupt_rain(pair.left, severity, rng)
        right = _corrupt_rain(pair.right, severity, rng)
    elif kind == "fog":
        h, w, _ = pair.left.shape
        field = _ValueNoise(rng, 22.0, (h, w)).sample(
            *np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                         indexing="ij"))
        left = _corrupt_fog(pair.left, severity, rng, field)
        right = _corrupt_fog(pair.right, severity, rng, field)
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return StereoPair(left, right, pair.frame_index)


# -- public API -------------------------------------------------------------------


def synth_pair(domain_spec, frame_index, seed):
    """Render one deterministic stereo frame with ground truth.

    The scene is keyed by (seed, frame_index) only, so different domains
    show the same geometry under different corruptions; the corruption
    stream is additionally keyed by the corruption kind.
    """
    if not 0.0 <= domain_spec.severity <= 1.0:
        raise ValueError(f"severity must be in [0, 1], got {domain_spec.severity}")
    h, w = domain_spec.height, domain_spec.width
    scene_rng = np.random.default_rng([seed, frame_index, 101])
    planes = _build_scene(scene_rng, h, w)
    left, right, gt, valid = _render(planes, h, w)
    pair = StereoPair(left, right, frame_index)
    pair = apply_corruption(pair, domain_spec.kind, domain_spec.severity,
                            [seed, frame_index, 977, _KIND_ID[domain_spec.kind]])
    return pair, DisparityMap(gt, valid)


def frame_stream(domain_spec, seed, start=0, count=None):
    """Yield (pair, gt) frames for a domain, deterministically."""
    n = domain_spec.frames if count is None else count
    for i in range(start, start + n):
        yield synth_pair(domain_spec, i, seed)
