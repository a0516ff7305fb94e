"""Complexity benchmarks: analytic FLOP sweeps, measured scaling, and backbone/window/top-k
ablations.

Usage:
    cfg = SweepConfig(hw_values=(256, 1024, 4096), c=32, v=5, k=16)
    rows = flop_sweep(cfg)            # analytic, instant
    rows = time_sweep(cfg)            # single-threaded medians + log-log slopes
    write_csv(rows, "bench.csv")
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from mvad.complexity import flop_model, kv_memory, optimal_window_divisor
from mvad.conf import RunConfig
from mvad.errors import ConfigError, GeometryError, TimerResolutionError
from mvad.metrics import METRIC_NAMES
from mvad.mvas import dense_forward, init_block_params, mvas_forward
from mvad.tensor import Tensor, no_grad, precision

if TYPE_CHECKING:
    from mvad.synthdata import MultiViewDataset

logger = logging.getLogger(__name__)

CSV_HEADER = ("series", "hw", "c", "v", "a", "k", "flops", "median_ns", "slope")
ABLATION_HEADER = ("width", "a", "k", "status", "reason", "flops", "kv_elements") + tuple(
    f"{level}_{name}" for level, names in METRIC_NAMES.items() for name in names
)
QUIESCENCE_NOTE = "timings assume an otherwise idle machine"

_MAX_REPEAT_DOUBLINGS = 4


@dataclass(frozen=True)
class SweepConfig:
    hw_values: tuple[int, ...] = (256, 1024, 4096, 16384)
    c: int = 32
    v: int = 5
    k: int = 16
    a: int | None = None  # None: divisor-rounded optimum per size
    repeats: int = 5
    warmup: int = 1
    threads: int | None = None  # None: single-threaded
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> SweepConfig:
        if self.repeats < 5:
            raise ConfigError(f"repeats must be >= 5 for a stable median, got {self.repeats}")
        if not self.hw_values:
            raise ConfigError("hw_values is empty")
        for hw in self.hw_values:
            side = math.isqrt(hw)
            if side * side != hw:
                raise ConfigError(f"hw={hw} is not a square map size")
        if self.c < 2 or self.c % 2:
            raise ConfigError(f"c must be even, got {self.c}")
        if self.v < 2 or self.k < 1:
            raise ConfigError(f"need v >= 2 and k >= 1, got v={self.v} k={self.k}")
        return self

    def window_for(self, hw: int) -> int:
        side = math.isqrt(hw)
        if self.a is None:
            return optimal_window_divisor(side, side, self.c, self.v, self.k)
        return self.a

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["hw_values"] = list(self.hw_values)
        return data


@dataclass
class BenchRow:
    series: str
    hw: int
    c: int
    v: int
    a: int
    k: int
    flops: int
    median_ns: int | None = None
    slope: float | None = None

    def as_csv_row(self) -> list[str]:
        return [
            self.series,
            str(self.hw),
            str(self.c),
            str(self.v),
            str(self.a),
            str(self.k),
            str(self.flops),
            "" if self.median_ns is None else str(self.median_ns),
            "" if self.slope is None else f"{self.slope:.6f}",
        ]


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Least-squares slope of log(y) against log(x); ``None`` below two points."""
    if len(xs) < 2:
        return None
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _fill_slopes(rows: list[BenchRow], value: Callable[[BenchRow], float]) -> list[BenchRow]:
    for series in {r.series for r in rows}:
        members = [r for r in rows if r.series == series]
        slope = loglog_slope([r.hw for r in members], [value(r) for r in members])
        for r in members:
            r.slope = slope
    return rows


def flop_sweep(cfg: SweepConfig) -> list[BenchRow]:
    """Analytic MVAS and dense counts per hw; slope is the log-log slope of the counts."""
    cfg.validate()
    mvas_rows, dense_rows = [], []
    for hw in cfg.hw_values:
        side = math.isqrt(hw)
        a = cfg.window_for(hw)
        counts = flop_model(side, side, cfg.c, cfg.v, a, cfg.k)
        mvas_rows.append(BenchRow("mvas", hw, cfg.c, cfg.v, a, cfg.k, counts.mvas))
        dense_rows.append(BenchRow("dense", hw, cfg.c, cfg.v, a, cfg.k, counts.dense))
    return _fill_slopes(mvas_rows + dense_rows, lambda r: r.flops)


def _median_ns(fn: Callable[[], object], repeats: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    for _ in range(_MAX_REPEAT_DOUBLINGS + 1):
        samples = []
        for _ in range(repeats):
            start = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - start)
        median = int(np.median(samples))
        if median > 0:
            return median
        repeats *= 2
    raise TimerResolutionError(f"median stayed at 0 ns after {repeats} repeats")


def time_sweep(cfg: SweepConfig) -> list[BenchRow]:
    """Median forward wall time of MVAS and the dense oracle per hw."""
    rows = flop_sweep(cfg)
    by_key = {(r.series, r.hw): r for r in rows}
    rng = np.random.default_rng(cfg.seed)
    limits = cfg.threads or 1
    with threadpool_limits(limits=limits), precision(cfg.dtype), no_grad():
        for hw in cfg.hw_values:
            side = math.isqrt(hw)
            a = cfg.window_for(hw)
            params = init_block_params(cfg.c, side, side, rng)
            x = Tensor(rng.normal(size=(cfg.v, side, side, cfg.c)))
            mvas_ns = _median_ns(
                lambda: mvas_forward(x, a, cfg.k, params), cfg.repeats, cfg.warmup
            )
            dense_ns = _median_ns(lambda: dense_forward(x, params), cfg.repeats, cfg.warmup)
            by_key[("mvas", hw)].median_ns = mvas_ns
            by_key[("dense", hw)].median_ns = dense_ns
            logger.info(
                f"hw={hw} a={a}: mvas {mvas_ns / 1e6:.1f} ms, dense {dense_ns / 1e6:.1f} ms"
            )
    return _fill_slopes(rows, lambda r: r.median_ns)


def write_csv(rows: Sequence[BenchRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_row())
    return path


def write_meta(csv_path: str | Path, meta: dict[str, Any]) -> Path:
    """Write ``meta`` as the ``.meta.json`` sibling of ``csv_path``."""
    meta_path = Path(csv_path).with_suffix(".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta_path


# -- Ablation --

TOP_K_SQUARE = "a2"  # k_j = a_j², one view's worth of windows per stage

StageSetting = tuple[int, int, int]


def per_stage(value: int | Sequence[int], name: str = "value") -> StageSetting:
    """Broadcast an int to all three stages, or check a per-stage sequence."""
    if isinstance(value, int):
        return (value, value, value)
    stages = tuple(int(x) for x in value)
    if len(stages) != 3:
        raise ConfigError(f"{name} needs 1 or 3 stage entries, got {list(stages)}")
    return stages


def parse_stage_setting(text: str, name: str = "value") -> StageSetting | str:
    """``"4"`` -> (4, 4, 4), ``"4,2,1"`` -> (4, 2, 1); ``"a2"`` is passed through."""
    text = text.strip()
    if text == TOP_K_SQUARE:
        return text
    try:
        parts = [int(part) for part in text.split(",") if part]
    except ValueError:
        parts = []
    if not parts:
        raise ConfigError(f"{name}: expected an int, a,b,c or '{TOP_K_SQUARE}', got '{text}'")
    return per_stage(parts[0] if len(parts) == 1 else parts, name)


def resolve_top_k(k: int | Sequence[int] | str, windows: StageSetting) -> StageSetting:
    if k == TOP_K_SQUARE:
        return tuple(a * a for a in windows)
    if isinstance(k, str):
        raise ConfigError(f"unknown top-k policy '{k}'")
    return per_stage(k, "k")


def _stage_label(values: Sequence[int]) -> str:
    return "-".join(str(x) for x in values)


@dataclass
class AblationRow:
    width: int
    a: StageSetting
    k: StageSetting
    status: str
    reason: str = ""
    flops: int | None = None
    kv_elements: int | None = None
    metrics: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def as_csv_row(self) -> list[str]:
        values = [
            str(self.width),
            _stage_label(self.a),
            _stage_label(self.k),
            self.status,
            self.reason,
            "" if self.flops is None else str(self.flops),
            "" if self.kv_elements is None else str(self.kv_elements),
        ]
        for level, names in METRIC_NAMES.items():
            for name in names:
                value = self.metrics.get(level, {}).get(name)
                values.append("" if value is None else f"{value:.6f}")
        return values


def stage_costs(config: RunConfig) -> tuple[int, int]:
    """Summed MVAS FLOPs and gathered K/V elements over every block of every stage."""
    flops = kv = 0
    for size, c, n_blocks, a, k in zip(
        config.stage_sizes,
        config.teacher_channels,
        config.blocks,
        config.window_sizes,
        config.top_k,
    ):
        flops += n_blocks * flop_model(size, size, c, config.views, a, k).mvas
        kv += n_blocks * kv_memory(size, size, c, a, k)
    return flops, kv


def _skip_reason(config: RunConfig, windows: StageSetting, top_k: StageSetting) -> str | None:
    for j, (size, a, k) in enumerate(zip(config.stage_sizes, windows, top_k)):
        if a < 1 or size % a:
            return f"stage {j + 1}: a={a} does not divide stage map {size}x{size}"
        limit = (config.views - 1) * a * a
        if not 1 <= k <= limit:
            return f"stage {j + 1}: k={k} outside [1, (v-1)*a^2={limit}]"
    return None


def ablation_grid(
    train_set: MultiViewDataset,
    test_set: MultiViewDataset,
    config: RunConfig,
    a_values: Sequence[int | Sequence[int]],
    k_values: Sequence[int | Sequence[int] | str],
    *,
    widths: Sequence[int] | None = None,
    epochs: int | None = None,
) -> list[AblationRow]:
    """Train and evaluate one model per valid (width, a, k) cell.

    ``a`` and ``k`` entries are an int for every stage or one value per stage;
    ``k`` may also be ``"a2"``. A width ``c1`` sets the backbone channels to
    (c1, 2·c1, 4·c1). Invalid cells are recorded as skipped with a reason.
    """
    from mvad.model import MvadModel
    from mvad.pipeline import evaluate, train

    if widths is None:
        widths = [config.teacher_channels[0]]
    rows = []
    for width in widths:
        for a_value in a_values:
            windows = per_stage(a_value, "a")
            for k_value in k_values:
                top_k = resolve_top_k(k_value, windows)
                label = f"width={width} a={_stage_label(windows)} k={_stage_label(top_k)}"
                reason = _skip_reason(config, windows, top_k)
                if reason is not None:
                    logger.warning(f"Skipping ablation cell {label}: {reason}")
                    rows.append(AblationRow(width, windows, top_k, "skipped", reason))
                    continue
                cell = config.replace(
                    teacher_channels=(width, 2 * width, 4 * width),
                    window_sizes=windows,
                    top_k=top_k,
                    epochs=config.epochs if epochs is None else epochs,
                )
                try:
                    cell.validate()
                    flops, kv = stage_costs(cell)
                except (ConfigError, GeometryError) as e:
                    logger.warning(f"Skipping ablation cell {label}: {e}")
                    rows.append(AblationRow(width, windows, top_k, "skipped", str(e)))
                    continue
                model = MvadModel.init(cell)
                train(model, train_set, cell)
                report = evaluate(model, test_set, cell).report
                rows.append(
                    AblationRow(width, windows, top_k, "ok", "", flops, kv, report["metrics"])
                )
                logger.info(f"Ablation cell {label} done")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow(row.as_csv_row())
    return path
