"""Census / SGM kernel tests.

The core oracle enumerates every disparity sequence on a short strip and
builds the exact prefix-minimum energy table; un-normalized single-path SGM
must reproduce it integer-for-integer. Both kernel backends must agree
bit-for-bit on everything.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from robia import kernels

BACKENDS = kernels.available_backends()


def brute_force_prefix_table(cost_strip, p1, p2):
    """Min prefix energy per (column, disparity) over all D^W paths.

    Energy of a path d_0..d_{W-1} is sum of unary costs plus 0 / P1 / P2
    transition penalties (equal / one-off / larger jumps). Enumeration over
    the full D^W set, no recurrences, so it shares nothing with the kernel.
    """
    w, ndisp = cost_strip.shape
    table = np.full((w, ndisp), np.iinfo(np.int64).max, dtype=np.int64)
    for path in itertools.product(range(ndisp), repeat=w):
        energy = 0
        for c, d in enumerate(path):
            energy += cost_strip[c, d]
            if c > 0:
                jump = abs(d - path[c - 1])
                energy += 0 if jump == 0 else (p1 if jump == 1 else p2)
            if energy < table[c, d]:
                table[c, d] = energy
    return table


def unnormalize_sgm(l_norm):
    """Add back the per-column shifts the SGM recurrence subtracts.

    The recurrence subtracts min_k L(prev, k) each step, so the raw Viterbi
    table is recovered column by column from the normalized one.
    """
    w, ndisp = l_norm.shape
    raw = np.zeros_like(l_norm, dtype=np.int64)
    raw[0] = l_norm[0]
    for c in range(1, w):
        raw[c] = l_norm[c] + raw[c - 1].min()
    return raw


class TestSgmOracle:
    def test_single_path_matches_exhaustive_dp(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            w = int(rng.integers(2, 7))
            ndisp = int(rng.integers(2, 5))
            strip = rng.integers(0, 21, size=(1, w, ndisp)).astype(np.int32)
            p1 = int(rng.integers(1, 8))
            p2 = int(rng.integers(p1, 30))
            agg = kernels.sgm_aggregate(strip, p1, p2, paths=["left"])
            raw = unnormalize_sgm(agg[0].astype(np.int64))
            oracle = brute_force_prefix_table(strip[0], p1, p2)
            np.testing.assert_array_equal(raw, oracle)

    def test_zero_penalties_collapse_to_scaled_cost(self):
        rng = np.random.default_rng(3)
        cost = rng.integers(0, 15, size=(5, 9, 4)).astype(np.int32)
        agg = kernels.sgm_aggregate(cost, 0, 0, paths=8)
        np.testing.assert_array_equal(agg, 8 * cost)

    def test_zero_cost_volume_stays_zero(self):
        cost = np.zeros((4, 6, 3), dtype=np.int32)
        agg = kernels.sgm_aggregate(cost, 10, 120, paths=8)
        np.testing.assert_array_equal(agg, 0)

    def test_penalty_validation(self):
        cost = np.zeros((2, 2, 2), dtype=np.int32)
        with pytest.raises(ValueError):
            kernels.sgm_aggregate(cost, 5, 3, paths=4)  # P2 < P1
        with pytest.raises(ValueError):
            kernels.sgm_aggregate(cost, -1, 3, paths=4)

    def test_unknown_path_name(self):
        cost = np.zeros((2, 2, 2), dtype=np.int32)
        with pytest.raises(ValueError):
            kernels.sgm_aggregate(cost, 1, 2, paths=["sideways"])

    def test_aggregation_is_sum_of_single_paths(self):
        rng = np.random.default_rng(11)
        cost = rng.integers(0, 20, size=(6, 8, 5)).astype(np.int32)
        total = kernels.sgm_aggregate(cost, 10, 120, paths=4)
        parts = sum(kernels.sgm_aggregate(cost, 10, 120, paths=[p])
                    for p in ["left", "right", "up", "down"])
        np.testing.assert_array_equal(total, parts)


class TestCensusCost:
    def _texture(self, rng, h=12, w=20):
        return rng.random((h, w)).astype(np.float32)

    def test_identical_images_zero_cost_at_d0(self):
        rng = np.random.default_rng(5)
        gray = self._texture(rng)
        codes = kernels.census_transform(gray, 5)
        vol = kernels.hamming_cost_volume(codes, codes, 4, shift_dir=1)
        np.testing.assert_array_equal(vol[:, :, 0], 0)

    def test_shifted_image_zero_cost_at_shift(self):
        rng = np.random.default_rng(6)
        s = 3
        wide = self._texture(rng, 12, 26)
        left = wide[:, :-s]
        right = wide[:, s:]  # right view content sits s columns to the left
        cl = kernels.census_transform(left, 5)
        cr = kernels.census_transform(right, 5)
        vol = kernels.hamming_cost_volume(cl, cr, 6, shift_dir=1)
        # interior: away from image border (census window) and the shift gap
        interior = vol[3:-3, s + 3:-3, s]
        np.testing.assert_array_equal(interior, 0)

    def test_constant_image_all_zero_costs_in_bounds(self):
        gray = np.full((10, 14), 0.5, dtype=np.float32)
        codes = kernels.census_transform(gray, 5)
        np.testing.assert_array_equal(codes, 0)
        vol = kernels.hamming_cost_volume(codes, codes, 5, shift_dir=1)
        for d in range(5):
            np.testing.assert_array_equal(vol[:, d:, d], 0)

    def test_out_of_bounds_cost_is_maximal(self):
        rng = np.random.default_rng(8)
        gray = self._texture(rng)
        codes = kernels.census_transform(gray, 5)
        vol = kernels.hamming_cost_volume(codes, codes, 4, shift_dir=1)
        maxcost = 5 * 5 - 1
        for d in range(1, 4):
            np.testing.assert_array_equal(vol[:, :d, d], maxcost)

    def test_window_bigger_than_image_rejected(self):
        with pytest.raises(ValueError):
            kernels.census_transform(np.zeros((3, 3), dtype=np.float32), 5)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            kernels.census_transform(np.zeros((8, 8), dtype=np.float32), 4)

    def test_census_code_bit_width(self):
        rng = np.random.default_rng(9)
        gray = self._texture(rng)
        codes = kernels.census_transform(gray, 5)
        assert codes.dtype == np.uint64
        assert int(codes.max()) < 2 ** 24


@pytest.mark.skipif(len(BACKENDS) < 2, reason="numba backend unavailable")
class TestBackendEquivalence:
    def test_census_codes_identical(self):
        rng = np.random.default_rng(21)
        gray = rng.random((20, 30)).astype(np.float32)
        for win in (3, 5, 7):
            a = kernels.census_transform(gray, win, backend="numpy")
            b = kernels.census_transform(gray, win, backend="numba")
            np.testing.assert_array_equal(a, b)

    def test_cost_volume_identical(self):
        rng = np.random.default_rng(22)
        gl = rng.random((16, 24)).astype(np.float32)
        gr = rng.random((16, 24)).astype(np.float32)
        cl = kernels.census_transform(gl, 5)
        cr = kernels.census_transform(gr, 5)
        for sd in (1, -1):
            a = kernels.hamming_cost_volume(cl, cr, 8, shift_dir=sd, backend="numpy")
            b = kernels.hamming_cost_volume(cl, cr, 8, shift_dir=sd, backend="numba")
            np.testing.assert_array_equal(a, b)

    def test_sgm_identical(self):
        rng = np.random.default_rng(23)
        cost = rng.integers(0, 25, size=(14, 22, 8)).astype(np.int32)
        for paths in (4, 8, ["left"], ["down_right"]):
            a = kernels.sgm_aggregate(cost, 10, 120, paths=paths, backend="numpy")
            b = kernels.sgm_aggregate(cost, 10, 120, paths=paths, backend="numba")
            np.testing.assert_array_equal(a, b)

    def test_env_flag_selects_backend(self, monkeypatch):
        monkeypatch.setenv("ROBIA_NUMBA", "0")
        assert kernels.resolve_backend(None) == "numpy"
        monkeypatch.setenv("ROBIA_NUMBA", "1")
        assert kernels.resolve_backend(None) == "numba"
        monkeypatch.delenv("ROBIA_NUMBA")
        assert kernels.resolve_backend(None) in BACKENDS
