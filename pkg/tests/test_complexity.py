"""Tests for the analytic MVAS / dense cost model."""

import itertools

import pytest

from mvad.complexity import (
    flop_model,
    kv_memory,
    optimal_window,
    optimal_window_divisor,
    valid_window_sizes,
)
from mvad.errors import GeometryError

# 30 (h, w, c, v, k) points: 5 map sizes x 3 view counts x 2 top-k values.
GRID = [
    (side, side, 32, v, k)
    for side, v, k in itertools.product([8, 16, 24, 32, 64], [2, 5, 8], [4, 16])
]


class TestFlopModel:
    def test_closed_form(self):
        counts = flop_model(16, 16, 8, 5, 4, 16)
        tokens = 256 // 16
        assert counts.mvas == 2 * 8 * (5 * 4**4 + 16 * tokens**2)
        assert counts.dense == (2 * 8 + 1) * 5 * 256**2

    def test_mvas_is_cheaper_on_large_maps(self):
        counts = flop_model(64, 64, 32, 5, 8, 16)
        assert counts.ratio > 10
        mvas, dense = counts
        assert mvas < dense

    @pytest.mark.parametrize("a,k", [(3, 4), (0, 1), (2, 0), (2, 100)])
    def test_invalid_settings_raise(self, a, k):
        with pytest.raises(GeometryError):
            flop_model(16, 16, 8, 5, a, k)


class TestOptimalWindow:
    @pytest.mark.parametrize("h,w,c,v,k", GRID)
    def test_divisor_choice_is_exhaustive_minimum(self, h, w, c, v, k):
        a_star = optimal_window_divisor(h, w, c, v, k)
        costs = {a: flop_model(h, w, c, v, a, k).mvas for a in valid_window_sizes(h, w, v, k)}
        assert costs[a_star] == min(costs.values())

    @pytest.mark.parametrize("side", [4, 16, 81, 256])
    def test_k_equal_v_gives_fourth_root(self, side):
        v = k = 5
        assert optimal_window(side, side, v, k) == pytest.approx((side * side) ** 0.25)

    def test_continuous_optimum_minimizes_cost(self):
        # d/da of v·a⁴ + k·(hw)²/a⁴ vanishes at a*.
        h = w = 64
        v, k = 5, 16
        a = optimal_window(h, w, v, k)
        assert v * a**8 == pytest.approx(k * (h * w) ** 2)

    def test_no_valid_window_raises(self):
        with pytest.raises(GeometryError):
            optimal_window_divisor(2, 2, 4, 2, 100)

    def test_non_positive_inputs_raise(self):
        with pytest.raises(GeometryError):
            optimal_window(0, 4, 2, 1)


class TestKvMemory:
    def test_counts_gathered_elements(self):
        # a²·k·t·c with t = hw/a²
        assert kv_memory(16, 16, 8, 4, 16) == 16 * 16 * 16 * 8

    def test_grows_with_k(self):
        assert kv_memory(16, 16, 8, 4, 32) == 2 * kv_memory(16, 16, 8, 4, 16)
