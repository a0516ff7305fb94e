"""Central-difference gradient checker."""

from __future__ import annotations

from typing import Callable

import numpy as np

from mvad.errors import GradCheckError
from mvad.tensor import Tape, Tensor, precision


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Runs in float64. Returns ``max |analytic − numeric| / max(1, |numeric|)`` over
    all coordinates of ``x``.
    """
    with precision("float64"):
        base = np.array(x.data, dtype=np.float64)
        leaf = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            out = f(leaf)
            if out.data.size != 1:
                raise GradCheckError(f"f must return a scalar, got shape {out.shape}")
            tape.backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[i] += h
            f_plus = f(Tensor(shifted.reshape(base.shape))).item()
            shifted[i] -= 2 * h
            f_minus = f(Tensor(shifted.reshape(base.shape))).item()
            flat[i] = (f_plus - f_minus) / (2 * h)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise GradCheckError("non-finite gradient during check")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
