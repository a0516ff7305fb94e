"""Training and evaluation of the multi-view reverse-distillation model.

Usage:
    config = build_config("desk")
    model = MvadModel.init(config)
    result = train(model, load("data/", "train"), config)
    evaluation = evaluate(model, load("data/", "test"), config)
    evaluation.report["metrics"]["sample"]["auroc"]
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np

from mvad import ops
from mvad.conf import RunConfig
from mvad.errors import (
    CompatibilityError,
    ConfigError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)
from mvad.metrics import METRIC_NAMES, RegionSet, ScoredSet, metric_table
from mvad.mvas import MvasBlockParams, mvas_block
from mvad.optim import AdamW
from mvad.tensor import Tape, Tensor, no_grad, precision

if TYPE_CHECKING:
    from mvad.model import MvadModel
    from mvad.synthdata import MultiViewDataset

logger = logging.getLogger(__name__)


@dataclass
class MultiViewBatch:
    """Whole samples: ``images[p, v, 3, H, W]`` with per-view masks and labels."""

    images: Tensor
    masks: np.ndarray
    image_labels: np.ndarray
    sample_labels: np.ndarray
    sample_ids: list[int] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 5:
            raise ShapeError(f"batch images must be [p, v, C, H, W], got {self.images.shape}")
        p, v, _, h, w = self.images.shape
        if self.masks.shape != (p, v, h, w) or self.image_labels.shape != (p, v):
            raise ShapeError(
                f"masks {self.masks.shape} / labels {self.image_labels.shape} "
                f"do not match images {self.images.shape}"
            )
        if not np.array_equal(self.sample_labels, self.image_labels.max(axis=1)):
            raise CompatibilityError("sample labels disagree with the OR of their view labels")
        has_mask = self.masks.reshape(p, v, -1).any(axis=-1)
        if not np.array_equal(has_mask, self.image_labels.astype(bool)):
            raise CompatibilityError("a view's mask and its image label disagree")

    @property
    def p(self) -> int:
        return self.images.shape[0]

    @property
    def v(self) -> int:
        return self.images.shape[1]


@dataclass
class FeaturePyramid:
    """Three stage feature maps ``[n, c_j, h_j, w_j]``, shallowest first."""

    stages: list[Tensor]

    def __iter__(self):
        return iter(self.stages)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, j: int) -> Tensor:
        return self.stages[j]

    def check_geometry(self) -> FeaturePyramid:
        for prev, nxt in zip(self.stages, self.stages[1:]):
            _, c0, h0, w0 = prev.shape
            _, c1, h1, w1 = nxt.shape
            if (h1 * 2, w1 * 2, c1) != (h0, w0, 2 * c0):
                raise ShapeError(
                    f"pyramid stages must halve spatially and double channels: "
                    f"{prev.shape} -> {nxt.shape}"
                )
        return self


@dataclass
class ScoreSet:
    pixel_maps: np.ndarray  # [p, v, H, W]
    image_scores: np.ndarray  # [p, v]
    sample_scores: np.ndarray  # [p]


# -- Forward pass --


def teacher_forward(model: MvadModel, images: Tensor) -> FeaturePyramid:
    """Frozen teacher features of ``images[n, 3, H, W]``."""
    return FeaturePyramid(model.teacher(images))


def enhance_stage(
    stage_feats: Tensor,
    blocks: Sequence[MvasBlockParams],
    a: int,
    k: int,
    *,
    ln_eps: float = ops.LN_EPS,
) -> Tensor:
    """Chain ``blocks`` over each sample's views of ``stage_feats[p, v, c, h, w]``.

    Views are fused within a sample only; samples never see each other.
    """
    if not blocks:
        return stage_feats
    if stage_feats.ndim != 5:
        raise ShapeError(f"enhance_stage expects [p, v, c, h, w], got {stage_feats.shape}")
    enhanced = []
    for i in range(stage_feats.shape[0]):
        x = ops.permute(ops.slice(stage_feats, (i,)), (0, 2, 3, 1))
        for block in blocks:
            x = mvas_block(x, block, a, k, ln_eps=ln_eps)
        enhanced.append(ops.permute(x, (0, 3, 1, 2)))
    return ops.stack(enhanced, dim=0)


def fpn_fuse(model: MvadModel, enhanced: FeaturePyramid) -> Tensor:
    if len(enhanced) != 3:
        raise ShapeError(f"fpn_fuse needs 3 stages, got {len(enhanced)}")
    return model.neck(enhanced.stages)


def decoder_forward(model: MvadModel, bottleneck: Tensor) -> FeaturePyramid:
    return FeaturePyramid(model.decoder(bottleneck))


def forward(model: MvadModel, images: Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
    """(f_E, f_D) for ``images[p, v, 3, H, W]``; both pyramids are ``[p·v, ...]``."""
    p, v, *rest = images.shape
    flat = ops.reshape(images, (p * v, *rest))
    f_e = teacher_forward(model, flat)
    a_values = model.config.window_sizes
    k_values = model.config.effective_top_k()
    enhanced = []
    for feats, blocks, a, k in zip(f_e, model.mvas_stages, a_values, k_values):
        grouped = ops.reshape(feats, (p, v, *feats.shape[1:]))
        out = enhance_stage(grouped, blocks, a, k, ln_eps=model.config.ln_eps)
        enhanced.append(ops.reshape(out, feats.shape))
    bottleneck = fpn_fuse(model, FeaturePyramid(enhanced))
    return f_e, decoder_forward(model, bottleneck)


# -- Loss and scores --


def distillation_loss(f_e: Sequence[Tensor], f_d: Sequence[Tensor]) -> Tensor:
    """Σ_j (1/(h_j·w_j))·‖f_E^j − f_D^j‖², channels summed, batch averaged."""
    f_e, f_d = list(f_e), list(f_d)
    if len(f_e) != len(f_d) or not f_e:
        raise ShapeError(f"pyramids have {len(f_e)} and {len(f_d)} stages")
    total = ops.mse_loss(f_e[0], f_d[0])
    for e, d in zip(f_e[1:], f_d[1:]):
        total = ops.add(total, ops.mse_loss(e, d))
    return total


def anomaly_maps(
    f_e: Sequence[Tensor],
    f_d: Sequence[Tensor],
    height: int,
    width: int,
    *,
    eps: float = ops.COS_EPS,
    combine: str = "mean",
    smoothing_sigma: float | None = None,
) -> np.ndarray:
    """Per-pixel ``1 − cos(f_E, f_D)`` per stage, nearest-upsampled to H×W, then combined.

    Returns ``[n, H, W]``.
    """
    if combine not in ("mean", "sum"):
        raise ConfigError(f"map_combine must be 'mean' or 'sum', got {combine}")
    total = None
    n_stages = 0
    with no_grad():
        for e, d in zip(f_e, f_d):
            if e.shape != d.shape:
                raise ShapeError(f"stage shapes differ: {e.shape} vs {d.shape}")
            h, w = e.shape[-2:]
            if height % h or width % w or height // h != width // w:
                raise ShapeError(f"stage map {h}x{w} does not tile {height}x{width}")
            distance = 1.0 - ops.cosine_similarity(e, d, dim=1, eps=eps).data
            # Two vanishing feature vectors agree; the clamp alone would score them 1.
            silent_e = np.linalg.norm(e.data, axis=1) <= eps
            distance[silent_e & (np.linalg.norm(d.data, axis=1) <= eps)] = 0.0
            upsampled = ops.upsample_nearest(Tensor(distance, dtype=np.float64), height // h).data
            total = upsampled if total is None else total + upsampled
            n_stages += 1
    maps = total / n_stages if combine == "mean" else total
    if smoothing_sigma:
        from scipy.ndimage import gaussian_filter

        maps = np.stack([gaussian_filter(m, sigma=smoothing_sigma) for m in maps])
    return maps


def aggregate_scores(pixel_maps: np.ndarray, p: int, v: int) -> ScoreSet:
    """Image score = spatial max of its map; sample score = max over its views."""
    maps = np.asarray(pixel_maps).reshape(p, v, *np.shape(pixel_maps)[-2:])
    image_scores = maps.max(axis=(-2, -1))
    return ScoreSet(pixel_maps=maps, image_scores=image_scores, sample_scores=image_scores.max(1))


# -- Training --


@dataclass
class TrainResult:
    model: MvadModel
    losses: list[float]
    epochs: int

    @property
    def steps(self) -> int:
        return len(self.losses)


def _select(dataset: MultiViewDataset, config: RunConfig) -> MultiViewDataset:
    return dataset.filter_category(config.category) if config.category else dataset


def _check_dataset(model: MvadModel, dataset: MultiViewDataset) -> None:
    config = model.config
    if dataset.views != config.views or dataset.resolution != config.image_size:
        raise CompatibilityError(
            f"dataset has v={dataset.views}, {dataset.resolution}px; "
            f"model expects v={config.views}, {config.image_size}px"
        )


def train(
    model: MvadModel,
    dataset: MultiViewDataset,
    config: RunConfig | None = None,
    *,
    on_first_step: Callable[[Tape], None] | None = None,
) -> TrainResult:
    """AdamW on the MVAS, neck and decoder parameters; the teacher stays frozen.

    ``on_first_step`` receives the first step's tape after its backward pass.
    """
    config = config or model.config
    _check_dataset(model, dataset)
    dataset = _select(dataset, config)
    if len(dataset) == 0:
        raise ConfigError("training split is empty")
    if dataset.split != "train":
        logger.warning(f"Training on the '{dataset.split}' split")

    opt = AdamW(
        model.parameters(),
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    losses: list[float] = []
    tape = Tape()
    with precision(model.dtype.name):
        for epoch in range(config.epochs):
            epoch_seed = np.random.SeedSequence([config.seed, 1 + epoch])
            batches = dataset.batches(config.batch_samples, shuffle=True, seed=epoch_seed)
            for batch in batches:
                step = len(losses)
                images = Tensor(batch.images.data)
                tape.reset()
                with tape:
                    try:
                        f_e, f_d = forward(model, images)
                        loss = distillation_loss(f_e, f_d)
                    except NonFiniteError as e:
                        raise DivergenceError(
                            f"non-finite value at step {step}: {e}", step=step
                        ) from e
                    value = loss.item()
                    if not math.isfinite(value):
                        raise DivergenceError(
                            f"loss diverged at step {step}", step=step, loss=value
                        )
                    tape.backward(loss)
                if step == 0 and on_first_step is not None:
                    on_first_step(tape)
                opt.step()
                opt.zero_grad()
                losses.append(value)
                logger.debug(f"step {step}: loss={value:.6f}")
            if losses:
                logger.info(f"epoch {epoch + 1}/{config.epochs}: last loss {losses[-1]:.6f}")
    return TrainResult(model=model, losses=losses, epochs=config.epochs)


# -- Evaluation --


@dataclass
class Evaluation:
    report: dict[str, Any]
    scores: ScoreSet
    rows: list[dict[str, Any]]


def _setting(config: RunConfig) -> str:
    return "single-class" if config.category else "multi-class"


def evaluate(
    model: MvadModel,
    dataset: MultiViewDataset,
    config: RunConfig | None = None,
    *,
    decoder_override: str | None = None,
) -> Evaluation:
    """Score every test sample and compute the ten sample/image/pixel metrics.

    ``decoder_override="teacher"`` replaces f_D by f_E (all-zero anomaly maps).
    """
    if decoder_override not in (None, "teacher"):
        raise ConfigError(f"Unknown decoder override '{decoder_override}'")
    config = config or model.config
    _check_dataset(model, dataset)
    dataset = _select(dataset, config)
    if len(dataset) == 0:
        raise ConfigError("evaluation split is empty")

    size = config.image_size
    maps, masks, image_labels, sample_labels = [], [], [], []
    sample_ids, categories = [], []
    with precision(model.dtype.name), no_grad():
        for batch in dataset.batches(config.batch_samples):
            images = Tensor(batch.images.data)
            if decoder_override == "teacher":
                p, v, *rest = images.shape
                f_e = teacher_forward(model, ops.reshape(images, (p * v, *rest)))
                f_d = f_e
            else:
                f_e, f_d = forward(model, images)
            batch_maps = anomaly_maps(
                f_e,
                f_d,
                size,
                size,
                eps=config.cos_eps,
                combine=config.map_combine,
                smoothing_sigma=config.smoothing_sigma if config.smoothing else None,
            )
            maps.append(batch_maps.reshape(batch.p, batch.v, size, size))
            masks.append(batch.masks)
            image_labels.append(batch.image_labels)
            sample_labels.append(batch.sample_labels)
            sample_ids.extend(batch.sample_ids)
            categories.extend(batch.categories)

    all_maps = np.concatenate(maps)
    all_masks = np.concatenate(masks)
    img_labels = np.concatenate(image_labels)
    smp_labels = np.concatenate(sample_labels)
    scores = aggregate_scores(all_maps, *all_maps.shape[:2])

    thresholds = config.pro_thresholds or None
    metrics, undefined = metric_table(
        ScoredSet(scores.sample_scores, smp_labels),
        ScoredSet(scores.image_scores, img_labels),
        ScoredSet(all_maps, all_masks),
        RegionSet.from_masks(all_masks, all_maps),
        fpr_limit=config.pro_fpr_limit,
        thresholds=thresholds,
    )
    rows = [
        {
            "sample_id": sid,
            "category": cat,
            "sample_label": int(smp_labels[i]),
            "sample_score": float(scores.sample_scores[i]),
            "image_labels": [int(x) for x in img_labels[i]],
            "image_scores": [float(x) for x in scores.image_scores[i]],
        }
        for i, (sid, cat) in enumerate(zip(sample_ids, categories))
    ]
    report = {
        "format_version": 1,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "setting": _setting(config),
        "category": config.category,
        "decoder_override": decoder_override,
        "counts": {
            "samples": int(smp_labels.size),
            "anomalous_samples": int(smp_labels.sum()),
            "views": int(img_labels.shape[1]),
        },
        "pro": {"fpr_limit": config.pro_fpr_limit, "thresholds": thresholds},
        "metrics": metrics,
        "undefined": undefined,
    }
    logger.info(
        f"Evaluated {len(rows)} samples: sample AUROC={metrics['sample']['auroc']}, "
        f"pixel AUROC={metrics['pixel']['auroc']}"
    )
    return Evaluation(report=report, scores=scores, rows=rows)


def cross_setting_average(reports: Sequence[dict[str, Any]]) -> dict[str, dict[str, float | None]]:
    """Average each metric over the reports where it is defined (``None`` if nowhere)."""
    averaged: dict[str, dict[str, float | None]] = {}
    for level, names in METRIC_NAMES.items():
        averaged[level] = {}
        for name in names:
            values = [r["metrics"][level][name] for r in reports]
            defined = [x for x in values if x is not None]
            averaged[level][name] = float(np.mean(defined)) if defined else None
    return averaged
