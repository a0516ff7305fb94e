"""Multi-view adaptive selection (MVAS) attention.

Each view's feature map is cut into a×a neighbourhood windows. For every
window of the query view, window descriptors pick the k most correlated
windows among all other views; the query window then cross-attends only to the
tokens of those k windows.

Usage:
    params = init_block_params(c=16, h=16, w=16, rng=np.random.default_rng(0))
    y = mvas_forward(x, a=4, k=8, params=params)      # x: Tensor[v, h, w, c]
    out = mvas_block(x, params, a=4, k=8)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from mvad import ops
from mvad.errors import GeometryError, ShapeError
from mvad.optim import Parameter
from mvad.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class WindowGrid:
    """Feature map(s) partitioned into a² windows of t = hw/a² tokens.

    ``windows`` is ``[..., a², t, c]``; leading extents (e.g. stacked views)
    are preserved from the input.
    """

    windows: Tensor
    a: int
    origin_shape: tuple[int, int, int]

    @property
    def tokens_per_window(self) -> int:
        return self.windows.shape[-2]


@dataclass
class CorrelationMatrix:
    values: np.ndarray  # [a², (v−1)·a²]


@dataclass
class TopKSelection:
    indices: np.ndarray  # [a², k], int64
    k: int


@dataclass
class MvasBlockParams:
    """Weights of one MVAS block; linear weights are stored ``[c_in, c_out]``."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    mlp_w1: Parameter
    mlp_b1: Parameter
    mlp_w2: Parameter
    mlp_b2: Parameter
    ln1_gamma: Parameter
    ln1_beta: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter
    pos: Tensor
    w_sel: Parameter | None = None

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name in (
            "w_q",
            "w_k",
            "w_v",
            "mlp_w1",
            "mlp_b1",
            "mlp_w2",
            "mlp_b2",
            "ln1_gamma",
            "ln1_beta",
            "ln2_gamma",
            "ln2_beta",
            "w_sel",
        ):
            param = getattr(self, name)
            if param is not None:
                yield name, param

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def positional_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2D sinusoidal table ``[h, w, c]``: first half of channels encode the row,
    second half the column."""
    if c % 2:
        raise ShapeError(f"positional encoding needs an even channel count, got {c}")
    half = c // 2
    j = np.arange(half)
    freq = 1.0 / (10000.0 ** (2 * (j // 2) / half))

    def encode(pos: np.ndarray) -> np.ndarray:
        angles = pos[:, None] * freq[None, :]
        return np.where(j % 2 == 0, np.sin(angles), np.cos(angles))

    rows = encode(np.arange(h, dtype=np.float64))  # [h, half]
    cols = encode(np.arange(w, dtype=np.float64))  # [w, half]
    table = np.empty((h, w, c))
    table[:, :, :half] = rows[:, None, :]
    table[:, :, half:] = cols[None, :, :]
    return table


def init_block_params(
    c: int,
    h: int,
    w: int,
    rng: np.random.Generator,
    *,
    selection_projection: bool = False,
) -> MvasBlockParams:
    def weight(fan_in: int, fan_out: int) -> Parameter:
        return Parameter(Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))))

    return MvasBlockParams(
        w_q=weight(c, c),
        w_k=weight(c, c),
        w_v=weight(c, c),
        mlp_w1=weight(c, 4 * c),
        mlp_b1=Parameter(Tensor(np.zeros(4 * c))),
        mlp_w2=weight(4 * c, c),
        mlp_b2=Parameter(Tensor(np.zeros(c))),
        ln1_gamma=Parameter(Tensor(np.ones(c))),
        ln1_beta=Parameter(Tensor(np.zeros(c))),
        ln2_gamma=Parameter(Tensor(np.ones(c))),
        ln2_beta=Parameter(Tensor(np.zeros(c))),
        pos=Tensor(positional_encoding(h, w, c)),
        w_sel=weight(c, c) if selection_projection else None,
    )


# -- Windows --


def _check_grid(h: int, w: int, a: int) -> None:
    if a < 1 or h % a or w % a:
        raise GeometryError(f"window grid a={a} must divide the {h}x{w} feature map")


def partition_windows(x: Tensor, a: int) -> WindowGrid:
    """Cut ``x[..., h, w, c]`` into a² windows; window (r, s) has index r·a + s and
    holds the (h/a)×(w/a) block at offset (r·h/a, s·w/a), tokens row-major."""
    if x.ndim < 3:
        raise ShapeError(f"partition_windows: expected [..., h, w, c], got {x.shape}")
    *lead, h, w, c = x.shape
    _check_grid(h, w, a)
    bh, bw = h // a, w // a
    n = len(lead)
    y = ops.reshape(x, (*lead, a, bh, a, bw, c))
    y = ops.permute(y, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    y = ops.reshape(y, (*lead, a * a, bh * bw, c))
    return WindowGrid(windows=y, a=a, origin_shape=(h, w, c))


def unpartition_windows(grid: WindowGrid) -> Tensor:
    """Exact inverse of :func:`partition_windows`."""
    h, w, c = grid.origin_shape
    a = grid.a
    _check_grid(h, w, a)
    *lead, n_win, t, wc = grid.windows.shape
    if n_win != a * a or t * n_win != h * w or wc != c:
        raise GeometryError(
            f"window grid {grid.windows.shape} inconsistent with origin "
            f"{grid.origin_shape}, a={a}"
        )
    bh, bw = h // a, w // a
    n = len(lead)
    y = ops.reshape(grid.windows, (*lead, a, a, bh, bw, c))
    y = ops.permute(y, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return ops.reshape(y, (*lead, h, w, c))


# -- Selection --


def project_qkv(
    x_s: WindowGrid,
    x_m: WindowGrid,
    params: MvasBlockParams,
) -> tuple[Tensor, Tensor, Tensor]:
    """Q from the query view's windows; K, V from the other views' windows stacked
    view-major (original view order, window order within each view)."""
    if x_m.a != x_s.a or x_m.windows.shape[-2:] != x_s.windows.shape[-2:]:
        raise ShapeError(
            f"project_qkv: query grid {x_s.windows.shape} and multi-view grid "
            f"{x_m.windows.shape} disagree"
        )
    t, c = x_s.windows.shape[-2:]
    if params.channels != c:
        raise ShapeError(f"project_qkv: params expect c={params.channels}, features have c={c}")
    stacked = ops.reshape(x_m.windows, (-1, t, c))
    q_s = ops.matmul(x_s.windows, params.w_q.tensor)
    k_m = ops.matmul(stacked, params.w_k.tensor)
    v_m = ops.matmul(stacked, params.w_v.tensor)
    return q_s, k_m, v_m


def window_descriptors(q_s: Tensor, k_m: Tensor) -> tuple[Tensor, Tensor]:
    """Per-window token means of the projected query and key windows."""
    return ops.mean(q_s, dim=1), ops.mean(k_m, dim=1)


def correlation(a_s: Tensor, a_m: Tensor) -> CorrelationMatrix:
    if a_s.shape[-1] != a_m.shape[-1]:
        raise ShapeError(f"correlation: descriptor widths differ, {a_s.shape} vs {a_m.shape}")
    return CorrelationMatrix(values=a_s.data @ a_m.data.T)


def topk_indices(a_c: CorrelationMatrix | np.ndarray, k: int) -> TopKSelection:
    """Per row, the k largest columns by descending value; ties go to the lower index."""
    values = a_c.values if isinstance(a_c, CorrelationMatrix) else np.asarray(a_c)
    n_cols = values.shape[-1]
    if not 1 <= k <= n_cols:
        raise ShapeError(f"top-k: k={k} outside [1, {n_cols}]")
    cols = np.broadcast_to(np.arange(n_cols), values.shape)
    # lexsort: last key is primary.
    order = np.lexsort((cols, -values), axis=-1)
    return TopKSelection(indices=np.ascontiguousarray(order[..., :k], dtype=np.int64), k=k)


def gather_topk(k_m: Tensor, v_m: Tensor, sel: TopKSelection) -> tuple[Tensor, Tensor]:
    """Concatenate, per query window, the tokens of its selected windows in selection order."""
    n_query = sel.indices.shape[0]
    t, c = k_m.shape[-2:]
    k_sel = ops.reshape(ops.gather(k_m, 0, sel.indices), (n_query, sel.k * t, c))
    v_sel = ops.reshape(ops.gather(v_m, 0, sel.indices), (n_query, sel.k * t, c))
    return k_sel, v_sel


def neighborhood_cross_attention(q_s: Tensor, k_sel: Tensor, v_sel: Tensor, c: int) -> Tensor:
    """softmax(Q Kᵀ / √c) V, independently per query window (single head)."""
    logits = ops.scale(ops.matmul(q_s, ops.permute(k_sel, (0, 2, 1))), 1.0 / math.sqrt(c))
    return ops.matmul(ops.softmax(logits, dim=-1), v_sel)


def _validate(x: Tensor, a: int, k: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected multi-view features [v, h, w, c], got {x.shape}")
    v, h, w, _ = x.shape
    if v < 2:
        raise ShapeError(f"multi-view attention needs v >= 2 views, got {v}")
    _check_grid(h, w, a)
    if not 1 <= k <= (v - 1) * a * a:
        raise ShapeError(f"k={k} outside [1, (v-1)·a²={(v - 1) * a * a}]")


def select_windows(q_s: Tensor, k_m: Tensor, k: int, params: MvasBlockParams) -> TopKSelection:
    """Descriptors → correlation → top-k. Indices carry no gradient."""
    with no_grad():
        a_s, a_m = window_descriptors(q_s, k_m)
        if params.w_sel is not None:
            a_s = ops.matmul(a_s, params.w_sel.tensor)
            a_m = ops.matmul(a_m, params.w_sel.tensor)
        return topk_indices(correlation(a_s, a_m), k)


def mvas_forward(x: Tensor, a: int, k: int, params: MvasBlockParams) -> Tensor:
    """Enhance every view of ``x[v, h, w, c]`` by attending to its top-k windows in
    the other views. Output has the input's shape, views in input order."""
    _validate(x, a, k)
    v, h, w, c = x.shape
    outputs = []
    for j in range(v):
        x_s = partition_windows(ops.slice(x, (j,)), a)
        others = [ops.slice(x, (slice(0, j),)), ops.slice(x, (slice(j + 1, v),))]
        x_m = partition_windows(ops.concat([o for o in others if o.shape[0]], dim=0), a)
        q_s, k_m, v_m = project_qkv(x_s, x_m, params)
        sel = select_windows(q_s, k_m, k, params)
        k_sel, v_sel = gather_topk(k_m, v_m, sel)
        y_s = neighborhood_cross_attention(q_s, k_sel, v_sel, c)
        outputs.append(unpartition_windows(WindowGrid(y_s, a, (h, w, c))))
    return ops.stack(outputs, dim=0)


def dense_cross_attention_oracle(
    x_s: Tensor | np.ndarray,
    x_m: Tensor | np.ndarray,
    params: MvasBlockParams,
    *,
    chunk_elems: int = 1 << 23,
) -> Tensor:
    """Full cross-attention of every query-view token over all other-view tokens.

    ``x_s`` is ``[h, w, c]``, ``x_m`` is ``[v−1, h, w, c]``. Forward only; query
    rows are processed in chunks so the logits block stays under ``chunk_elems``.
    """
    xs = x_s.data if isinstance(x_s, Tensor) else np.asarray(x_s)
    xm = x_m.data if isinstance(x_m, Tensor) else np.asarray(x_m)
    h, w, c = xs.shape
    q = xs.reshape(h * w, c) @ params.w_q.tensor.data
    tokens = xm.reshape(-1, c)
    k = tokens @ params.w_k.tensor.data
    v = tokens @ params.w_v.tensor.data
    rows = max(1, chunk_elems // k.shape[0])
    out = np.empty_like(q)
    inv = 1.0 / math.sqrt(c)
    for start in range(0, q.shape[0], rows):
        logits = (q[start : start + rows] @ k.T) * inv
        logits -= logits.max(axis=-1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=-1, keepdims=True)
        out[start : start + rows] = logits @ v
    return Tensor(out.reshape(h, w, c), dtype=out.dtype)


def dense_forward(x: Tensor, params: MvasBlockParams) -> Tensor:
    """Dense oracle applied to every view of ``x[v, h, w, c]``."""
    data = x.data
    v = data.shape[0]
    views = [
        dense_cross_attention_oracle(data[j], np.concatenate([data[:j], data[j + 1 :]]), params)
        for j in range(v)
    ]
    return Tensor(np.stack([t.data for t in views]), dtype=data.dtype)


def mvas_block(
    x: Tensor, params: MvasBlockParams, a: int, k: int, *, ln_eps: float = ops.LN_EPS
) -> Tensor:
    """``X₁ = LN(MVAS(X + P)) + X``; ``X_o = LN(MLP(X₁)) + X₁`` with a token-wise
    c→4c→c GELU MLP. Norms apply to sublayer outputs before the residual add."""
    if x.ndim != 4:
        raise ShapeError(f"mvas_block: expected multi-view features [v, h, w, c], got {x.shape}")
    v, h, w, c = x.shape
    if params.pos.shape != (h, w, c):
        raise ShapeError(f"positional table {params.pos.shape} does not match map {(h, w, c)}")
    attended = mvas_forward(ops.add(x, params.pos), a, k, params)
    x1 = ops.add(
        ops.layer_norm(attended, -1, params.ln1_gamma.tensor, params.ln1_beta.tensor, ln_eps), x
    )
    hidden = ops.gelu(ops.linear(x1, params.mlp_w1.tensor, params.mlp_b1.tensor))
    mlp = ops.linear(hidden, params.mlp_w2.tensor, params.mlp_b2.tensor)
    normed = ops.layer_norm(mlp, -1, params.ln2_gamma.tensor, params.ln2_beta.tensor, ln_eps)
    return ops.add(normed, x1)
