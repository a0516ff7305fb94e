"""Threshold-free detection metrics (AUROC, AP, F1-max) and region-level PRO.

Tie conventions: AUROC gives half credit to tied positive/negative pairs, AP
and F1-max move all items sharing a score across the threshold together.
Regions for PRO are 4-connected components of the ground-truth mask.

Usage:
    auroc(scores, labels)
    pro(RegionSet.from_masks(masks, maps), fpr_limit=0.3, thresholds=100)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from mvad.errors import ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

# 4-connectivity inside one map; no connections across stacked maps.
_FOUR_CONNECTED = np.array(
    [
        [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
        [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
        [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
    ]
)


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.size == 0:
            raise ShapeError("ScoredSet needs at least one element")
        if scores.shape != labels.shape:
            raise ShapeError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
        if not np.isin(labels, (0, 1)).all():
            raise ShapeError("labels must be binary (0/1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _scored(scores, labels) -> ScoredSet:
    if isinstance(scores, ScoredSet):
        return scores
    return ScoredSet(scores, labels)


def _ranked_groups(s: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) at the end of each distinct-score group, highest score first."""
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels, dtype=np.int64)
    fp = np.cumsum(1 - labels, dtype=np.int64)
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    return tp[ends], fp[ends]


def auroc(scores, labels=None) -> float:
    """P(score⁺ > score⁻) + ½·P(tie), via average ranks."""
    s = _scored(scores, labels)
    n_pos, n_neg = s.n_pos, s.n_neg
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(s.scores, method="average")
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels=None) -> float:
    s = _scored(scores, labels)
    n_pos = s.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive label")
    tp, fp = _ranked_groups(s)
    precision = tp / (tp + fp)
    delta_recall = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * delta_recall))


def f1_max(scores, labels=None) -> float:
    """Best F1 over thresholds at each distinct score (predict positive at ≥ threshold)."""
    s = _scored(scores, labels)
    n_pos = s.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive label")
    tp, fp = _ranked_groups(s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    return float(f1.max())


@dataclass
class RegionSet:
    """Ground-truth regions and the score maps they are scored against.

    ``labels`` holds component ids (0 = background, 1..n_regions) with the same
    shape as ``scores``.
    """

    labels: np.ndarray
    scores: np.ndarray
    n_regions: int

    @classmethod
    def from_masks(cls, masks, scores) -> RegionSet:
        masks = np.asarray(masks) != 0
        scores = np.asarray(scores, dtype=np.float64)
        if masks.shape != scores.shape:
            raise ShapeError(f"mask shape {masks.shape} does not match score shape {scores.shape}")
        if masks.ndim == 2:
            labels, n = ndimage.label(masks)
        elif masks.ndim == 3:
            labels, n = ndimage.label(masks, structure=_FOUR_CONNECTED)
        else:
            flat = masks.reshape(-1, *masks.shape[-2:])
            labels, n = ndimage.label(flat, structure=_FOUR_CONNECTED)
            labels = labels.reshape(masks.shape)
        return cls(labels=labels, scores=scores, n_regions=int(n))

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)[1:]


def pro_curve(
    regions: RegionSet, thresholds: int | None = 100
) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean per-region overlap) for predictions ``score ≥ θ``.

    ``thresholds=int`` sweeps θ uniformly from the highest to the lowest score;
    ``thresholds=None`` uses every distinct score. The curve is prefixed with
    (0, 0) and, since the lowest θ predicts every pixel, ends at (1, 1).
    Points are ordered by increasing FPR.
    """
    if regions.n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one ground-truth region")
    labels = regions.labels.ravel()
    scores = regions.scores.ravel()
    negatives = labels == 0
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs at least one negative pixel")

    # Mean overlap is additive over pixels: each region pixel weighs 1/(|region|·n_regions).
    sizes = regions.region_sizes()
    weight = np.zeros(labels.size)
    positive = ~negatives
    weight[positive] = 1.0 / (sizes[labels[positive] - 1] * regions.n_regions)

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    fp_tail = np.r_[np.cumsum(negatives[order][::-1])[::-1], 0]
    ov_tail = np.r_[np.cumsum(weight[order][::-1])[::-1], 0.0]

    if thresholds is None:
        theta = np.unique(sorted_scores)[::-1]
    else:
        if thresholds < 2:
            raise ValueError(f"PRO needs at least 2 thresholds, got {thresholds}")
        theta = np.linspace(sorted_scores[-1], sorted_scores[0], thresholds)
    idx = np.searchsorted(sorted_scores, theta, side="left")
    fpr = np.r_[0.0, fp_tail[idx] / n_neg]
    overlap = np.r_[0.0, ov_tail[idx]]
    return fpr, overlap


def _area_up_to(x: np.ndarray, y: np.ndarray, cap: float) -> float:
    """Trapezoid area under (x, y) on [0, cap]; beyond the last point y stays flat."""
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    i = int(np.searchsorted(x, cap, side="right"))
    if i < x.size:
        t = (cap - x[i - 1]) / (x[i] - x[i - 1])
        y_cap = y[i - 1] + t * (y[i] - y[i - 1])
    else:
        y_cap = y[-1]
    xs = np.r_[x[:i], cap]
    ys = np.r_[y[:i], y_cap]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def pro(regions: RegionSet, fpr_limit: float = 0.3, thresholds: int | None = 100) -> float:
    """Area under the PRO curve up to ``fpr_limit``, normalized by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, overlap = pro_curve(regions, thresholds)
    return _area_up_to(fpr, overlap, fpr_limit) / fpr_limit


METRIC_NAMES = {
    "sample": ("auroc", "ap", "f1max"),
    "image": ("auroc", "ap", "f1max"),
    "pixel": ("auroc", "ap", "f1max", "pro"),
}

_SCORED_METRICS = {"auroc": auroc, "ap": average_precision, "f1max": f1_max}


def metric_table(
    sample: ScoredSet,
    image: ScoredSet,
    pixel: ScoredSet,
    regions: RegionSet,
    *,
    fpr_limit: float = 0.3,
    thresholds: int | None = 100,
) -> tuple[dict[str, dict[str, float | None]], dict[str, str]]:
    """All ten metrics. Undefined ones are ``None`` with their reason in the second dict."""
    values: dict[str, dict[str, float | None]] = {}
    undefined: dict[str, str] = {}
    for level, scored in (("sample", sample), ("image", image), ("pixel", pixel)):
        values[level] = {}
        for name in METRIC_NAMES[level]:
            try:
                if name == "pro":
                    value = pro(regions, fpr_limit=fpr_limit, thresholds=thresholds)
                else:
                    value = _SCORED_METRICS[name](scored)
            except UndefinedMetricError as e:
                logger.warning(f"{level}.{name} undefined: {e}")
                values[level][name] = None
                undefined[f"{level}.{name}"] = str(e)
            else:
                values[level][name] = value
    return values, undefined
