"""Analytic cost model for MVAS versus dense cross-attention."""

from __future__ import annotations

from dataclasses import dataclass

from mvad.errors import GeometryError


@dataclass(frozen=True)
class FlopCount:
    mvas: int
    dense: int

    @property
    def ratio(self) -> float:
        return self.dense / self.mvas if self.mvas else float("inf")

    def __iter__(self):
        return iter((self.mvas, self.dense))


def is_valid_window(h: int, w: int, v: int, a: int, k: int) -> bool:
    return a >= 1 and h % a == 0 and w % a == 0 and 1 <= k <= (v - 1) * a * a


def valid_window_sizes(h: int, w: int, v: int, k: int) -> list[int]:
    """Every a dividing both h and w with enough candidate windows for k."""
    return [a for a in range(1, min(h, w) + 1) if is_valid_window(h, w, v, a, k)]


def flop_model(h: int, w: int, c: int, v: int, a: int, k: int) -> FlopCount:
    """Closed-form operation counts.

    MVAS: ``2c(v·a⁴ + k·(hw)²/a⁴)``; dense: ``(2c+1)·v·(hw)²``.
    """
    if not is_valid_window(h, w, v, a, k):
        raise GeometryError(f"a={a}, k={k} is not a valid window setting for {h}x{w}, v={v}")
    hw = h * w
    tokens = hw // (a * a)
    mvas = 2 * c * (v * a**4 + k * tokens * tokens)
    dense = (2 * c + 1) * v * hw * hw
    return FlopCount(mvas=mvas, dense=dense)


def optimal_window(h: int, w: int, v: int, k: int) -> float:
    """Continuous minimizer a* = (k/v)^(1/8)·(hw)^(1/4) of the MVAS cost."""
    if min(h, w, v, k) <= 0:
        raise GeometryError(f"optimal_window needs positive inputs, got h={h} w={w} v={v} k={k}")
    return (k / v) ** 0.125 * (h * w) ** 0.25


def optimal_window_divisor(h: int, w: int, c: int, v: int, k: int) -> int:
    """The legal a (dividing h and w, k-feasible) with the lowest MVAS cost.

    Ties resolve to the a closest to the continuous optimum, then the smaller a.
    """
    candidates = valid_window_sizes(h, w, v, k)
    if not candidates:
        raise GeometryError(f"no window size divides {h}x{w} with k={k}, v={v}")
    target = optimal_window(h, w, v, k)
    return min(
        candidates,
        key=lambda a: (flop_model(h, w, c, v, a, k).mvas, abs(a - target), a),
    )


def kv_memory(h: int, w: int, c: int, a: int, k: int) -> int:
    """Elements in one view's gathered K (or V) tensor: a²·k·t·c."""
    tokens = (h * w) // (a * a)
    return a * a * k * tokens * c
