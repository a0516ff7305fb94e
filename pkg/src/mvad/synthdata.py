"""Procedural multi-view anomaly-detection datasets.

Each sample is one latent object (a "nut", "plate" or "washer") rendered from
``views`` fixed viewpoints. Anomalies are painted onto a chosen subset of the
views of anomalous test samples, with exact pixel masks.

On-disk layout::

    root/manifest.json
    root/{split}/{sample:05}/{view}.mvt        float32 [3, H, W]
    root/{split}/{sample:05}/{view}.mask.mvt   float32 [H, W], 0/1

Usage:
    spec = DatasetSpec(seed=7, p_train=64)
    generate(spec, "data/")
    train_set = load("data/", "train")
    for batch in train_set.batches(4, shuffle=True, seed=0):
        ...
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from scipy import ndimage

from mvad.conf import get_setting
from mvad.errors import CompatibilityError, ConfigError, InvalidSpecError
from mvad.pipeline import MultiViewBatch
from mvad.serialize import load_tensor, save_tensor
from mvad.tensor import Tensor

logger = logging.getLogger(__name__)

ANOMALY_KINDS = ("blob", "scratch", "hole")
CATEGORIES = ("nut", "plate", "washer")
SPLITS = {"train": 0, "test": 1}

_BACKGROUND = 0.08
_NOISE_STD = 0.01
_BLUR_SIGMA = 0.6  # pixels; softens the rasterized outline
_TEXTURE_AMP = 0.06
_SCRATCH_HALF_WIDTH = 1.5
_BLOB_COLOR = (1.0, 0.5, 0.1)
_TINTS = {
    "nut": (1.0, 0.9, 0.75),
    "plate": (0.85, 0.95, 1.0),
    "washer": (0.95, 0.95, 0.95),
}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 7
    p_train: int = 64
    p_test_normal: int = 32
    p_test_anom: int = 32
    views: int = 5
    resolution: int = 64
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    views_affected: int = 1
    categories: tuple[str, ...] = CATEGORIES

    @property
    def anomaly_rate(self) -> float:
        total = self.p_test_normal + self.p_test_anom
        return self.p_test_anom / total if total else 0.0

    def with_anomaly_rate(self, rate: float) -> DatasetSpec:
        """Keep the test split size, re-divide it so ``rate`` of it is anomalous."""
        if not 0.0 <= rate <= 1.0:
            raise InvalidSpecError(f"anomaly rate must be in [0, 1], got {rate}")
        total = self.p_test_normal + self.p_test_anom
        anomalous = round(rate * total)
        return dataclasses.replace(self, p_test_normal=total - anomalous, p_test_anom=anomalous)

    def validate(self) -> DatasetSpec:
        if self.views < 2:
            raise InvalidSpecError(f"multi-view datasets need views >= 2, got {self.views}")
        if self.resolution < 16:
            raise InvalidSpecError(f"resolution must be >= 16, got {self.resolution}")
        if min(self.p_train, self.p_test_normal, self.p_test_anom) < 0:
            raise InvalidSpecError("sample counts must be non-negative")
        if not 1 <= self.views_affected <= self.views:
            raise InvalidSpecError(
                f"views_affected must be in [1, {self.views}], got {self.views_affected}"
            )
        unknown = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if not self.anomaly_kinds or unknown:
            raise InvalidSpecError(f"anomaly kinds must be a non-empty subset of {ANOMALY_KINDS}")
        unknown = set(self.categories) - set(CATEGORIES)
        if not self.categories or unknown:
            raise InvalidSpecError(f"categories must be a non-empty subset of {CATEGORIES}")
        return self

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DatasetSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpecError(f"Unknown dataset spec keys: {sorted(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        try:
            return cls(**values)
        except TypeError as e:
            raise InvalidSpecError(str(e)) from e


# -- Rendering --


@dataclass(frozen=True)
class _Latent:
    category: str
    scale: float
    lobes: int
    lobe_amp: float
    phase: float
    tex_freq: float
    tex_angle: float
    base: float
    inner: float

    @classmethod
    def draw(cls, category: str, rng: np.random.Generator) -> _Latent:
        return cls(
            category=category,
            scale=rng.uniform(0.5, 0.65),
            lobes=int(rng.integers(5, 9)),
            lobe_amp=rng.uniform(0.05, 0.12),
            phase=rng.uniform(0.0, 2 * math.pi),
            tex_freq=rng.uniform(6.0, 12.0),
            tex_angle=rng.uniform(0.0, math.pi),
            base=rng.uniform(0.55, 0.8),
            inner=rng.uniform(0.35, 0.5),
        )


def view_transform(j: int, views: int) -> tuple[float, bool, tuple[float, float]]:
    """(rotation, mirror, translation) of viewpoint ``j``; identical for every sample."""
    angle = math.pi * j / views
    t = 2 * math.pi * j / views
    return angle, j % 2 == 1, (0.08 * math.cos(t), 0.08 * math.sin(t))


def _object_coords(resolution: int, j: int, views: int) -> tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    y, x = np.meshgrid(centers, centers, indexing="ij")
    angle, mirror, (tx, ty) = view_transform(j, views)
    x, y = x - tx, y - ty
    cos, sin = math.cos(-angle), math.sin(-angle)
    u, w = cos * x - sin * y, sin * x + cos * y
    if mirror:
        u = -u
    return u, w


def _render_gray(latent: _Latent, u: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.hypot(u, w)
    phi = np.arctan2(w, u)
    s = latent.scale
    outline = s * (1.0 + latent.lobe_amp * np.cos(latent.lobes * phi + latent.phase))
    if latent.category == "nut":
        inside = (r < outline) & (r > 0.3 * s)
    elif latent.category == "plate":
        inside = u**4 + w**4 < s**4
    else:
        inside = (r > latent.inner * s) & (r < 0.5 * (s + outline))
    along = u * math.cos(latent.tex_angle) + w * math.sin(latent.tex_angle)
    texture = latent.base + _TEXTURE_AMP * np.sin(latent.tex_freq * along)
    return np.where(inside, texture, _BACKGROUND), inside


def _paint_anomaly(
    rgb: np.ndarray, inside: np.ndarray, kind: str, rng: np.random.Generator
) -> np.ndarray:
    """Paint one anomaly onto ``rgb[3, H, W]`` in place; returns its boolean mask.

    Anomalies live on the object surface: the mask is clipped to ``inside``
    and always holds at least the anchor pixel.
    """
    res = rgb.shape[-1]
    candidates = np.flatnonzero(inside)
    ci, cj = np.unravel_index(candidates[rng.integers(candidates.size)], inside.shape)
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")

    if kind == "scratch":
        points = [np.array([ci, cj], dtype=np.float64)]
        for _ in range(3):
            step = rng.uniform(0.15, 0.25) * res
            theta = rng.uniform(0.0, 2 * math.pi)
            points.append(points[-1] + step * np.array([math.sin(theta), math.cos(theta)]))
        dist = np.full(inside.shape, np.inf)
        for p0, p1 in zip(points[:-1], points[1:]):
            seg = p1 - p0
            t = ((ii - p0[0]) * seg[0] + (jj - p0[1]) * seg[1]) / float(seg @ seg)
            t = np.clip(t, 0.0, 1.0)
            dist = np.minimum(dist, np.hypot(ii - (p0[0] + t * seg[0]), jj - (p0[1] + t * seg[1])))
        mask = (dist <= _SCRATCH_HALF_WIDTH) & inside
        rgb[:, mask] = 0.02
        return mask

    dist = np.hypot(ii - ci, jj - cj)
    if kind == "blob":
        radius = rng.uniform(0.10, 0.16) * res
        mask = (dist <= radius) & inside
        falloff = 1.0 - 0.5 * (dist[mask] / radius) ** 2
        amp = rng.uniform(0.5, 0.7)
        glow = amp * np.asarray(_BLOB_COLOR)[:, None] * falloff[None]
        rgb[:, mask] = np.minimum(rgb[:, mask] + glow, 1.0)
    else:
        radius = rng.uniform(0.08, 0.13) * res
        mask = (dist <= radius) & inside
        rgb[:, mask] = 0.0
    return mask


@dataclass
class _Sample:
    images: np.ndarray  # [v, 3, H, W] float32
    masks: np.ndarray  # [v, H, W] float32
    record: dict[str, Any] = field(default_factory=dict)


def render_sample(
    spec: DatasetSpec, split: str, index: int, category: str, anomalous: bool
) -> _Sample:
    """Render one sample from its own seed stream ``(seed, split, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS[split], index]))
    latent = _Latent.draw(category, rng)
    res, v = spec.resolution, spec.views
    tint = np.asarray(_TINTS[category])[:, None, None]

    affected: dict[int, str] = {}
    if anomalous:
        chosen = np.sort(rng.choice(v, size=spec.views_affected, replace=False))
        affected = {int(j): str(rng.choice(spec.anomaly_kinds)) for j in chosen}

    images = np.empty((v, 3, res, res), dtype=np.float32)
    masks = np.zeros((v, res, res), dtype=np.float32)
    for j in range(v):
        gray, inside = _render_gray(latent, *_object_coords(res, j, v))
        gray = ndimage.gaussian_filter(gray, sigma=_BLUR_SIGMA, mode="nearest")
        gray = gray + rng.normal(0.0, _NOISE_STD, gray.shape)
        rgb = np.clip(gray[None] * tint, 0.0, 1.0)
        if j in affected:
            masks[j] = _paint_anomaly(rgb, inside, affected[j], rng)
        images[j] = rgb

    image_labels = [int(j in affected) for j in range(v)]
    record = {
        "id": index,
        "category": category,
        "image_labels": image_labels,
        "sample_label": int(any(image_labels)),
        "anomalies": [{"view": j, "kind": kind} for j, kind in affected.items()],
    }
    return _Sample(images=images, masks=masks, record=record)


def _test_layout(spec: DatasetSpec) -> np.ndarray:
    """Boolean anomalous flag per test sample, normal and anomalous interleaved by seed."""
    flags = np.r_[np.zeros(spec.p_test_normal, bool), np.ones(spec.p_test_anom, bool)]
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, len(SPLITS)]))
    return flags[order.permutation(flags.size)]


def _manifest_text(manifest: dict[str, Any]) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def generate(spec: DatasetSpec, root: str | Path, *, force: bool = False) -> Path:
    """Write the dataset described by ``spec`` under ``root``.

    A second call with the same spec finds the existing manifest and does
    nothing. A different existing dataset raises :class:`CompatibilityError`
    unless ``force`` is set.
    """
    spec.validate()
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not force:
        existing = json.loads(manifest_path.read_text())
        if (
            existing.get("spec") == spec.to_dict()
            and existing.get("format_version") == get_setting("DATASET_FORMAT_VERSION")
        ):
            logger.info(f"Dataset at {root} already matches the spec; nothing to do")
            return manifest_path
        raise CompatibilityError(f"{root} holds a different dataset; use force to overwrite")

    plan = {
        "train": [False] * spec.p_train,
        "test": list(_test_layout(spec)),
    }
    splits: dict[str, list[dict[str, Any]]] = {}
    for split, flags in plan.items():
        records = []
        for index, anomalous in enumerate(flags):
            category = spec.categories[index % len(spec.categories)]
            sample = render_sample(spec, split, index, category, bool(anomalous))
            sample_dir = root / split / f"{index:05d}"
            for j in range(spec.views):
                save_tensor(sample.images[j], sample_dir / f"{j}.mvt")
                save_tensor(sample.masks[j], sample_dir / f"{j}.mask.mvt")
            records.append(sample.record)
        splits[split] = records
        logger.debug(f"Rendered {len(records)} {split} samples")

    manifest = {
        "format_version": get_setting("DATASET_FORMAT_VERSION"),
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "counts": {
            "train": spec.p_train,
            "test": spec.p_test_normal + spec.p_test_anom,
            "test_anomalous": spec.p_test_anom,
            "views": spec.views,
            "images": (spec.p_train + spec.p_test_normal + spec.p_test_anom) * spec.views,
        },
        "splits": splits,
    }
    # Manifest last: a directory without one is an unfinished write.
    manifest_path.write_text(_manifest_text(manifest))
    logger.info(
        f"Wrote dataset to {root}: {manifest['counts']['images']} images, "
        f"{spec.p_test_anom} anomalous test samples"
    )
    return manifest_path


def read_manifest(root: str | Path) -> dict[str, Any]:
    path = Path(root) / "manifest.json"
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != get_setting("DATASET_FORMAT_VERSION"):
        raise CompatibilityError(f"{path}: unsupported dataset format version {version}")
    return manifest


def read_sample_dir(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Images ``[v, 3, H, W]`` and masks ``[v, H, W]`` of one sample directory."""
    path = Path(path)
    views = sorted(
        int(p.name.split(".")[0]) for p in path.glob("*.mvt") if not p.name.endswith(".mask.mvt")
    )
    if not views or views != list(range(len(views))):
        raise CompatibilityError(f"{path}: expected view files 0.mvt..N.mvt, found {views}")
    images = np.stack([load_tensor(path / f"{j}.mvt") for j in views])
    masks = np.stack([load_tensor(path / f"{j}.mask.mvt") for j in views])
    if images.ndim != 4 or images.shape[1] != 3 or masks.shape != (
        len(views),
        *images.shape[2:],
    ):
        raise CompatibilityError(f"{path}: image/mask shapes {images.shape}, {masks.shape}")
    return images, masks


class MultiViewDataset:
    """One split of a generated dataset, iterated in whole-sample batches.

    Usage:
        test_set = load("data/", "test")
        nuts = test_set.filter_category("nut")
        for batch in nuts.batches(4):
            batch.images  # Tensor[p, v, 3, H, W]
    """

    def __init__(self, root: str | Path, split: str, manifest: dict[str, Any], records=None):
        if split not in SPLITS:
            raise ConfigError(f"Unknown split '{split}'. Use one of {sorted(SPLITS)}.")
        self.root = Path(root)
        self.split = split
        self.manifest = manifest
        self.spec = DatasetSpec.from_dict(manifest["spec"])
        self.records: list[dict[str, Any]] = (
            list(manifest["splits"][split]) if records is None else list(records)
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def views(self) -> int:
        return self.spec.views

    @property
    def resolution(self) -> int:
        return self.spec.resolution

    @property
    def sample_ids(self) -> list[int]:
        return [r["id"] for r in self.records]

    @property
    def categories(self) -> list[str]:
        return sorted({r["category"] for r in self.records})

    def filter_category(self, name: str) -> MultiViewDataset:
        if name not in self.spec.categories:
            raise ConfigError(
                f"Unknown category '{name}'. Dataset has {list(self.spec.categories)}"
            )
        records = [r for r in self.records if r["category"] == name]
        return MultiViewDataset(self.root, self.split, self.manifest, records)

    def sample_dir(self, sample_id: int) -> Path:
        return self.root / self.split / f"{sample_id:05d}"

    def load_sample(self, position: int) -> tuple[np.ndarray, np.ndarray]:
        record = self.records[position]
        images, masks = read_sample_dir(self.sample_dir(record["id"]))
        expected = (self.views, 3, self.resolution, self.resolution)
        if images.shape != expected:
            raise CompatibilityError(
                f"sample {record['id']}: images {images.shape}, manifest says {expected}"
            )
        return images, masks

    def batch(self, positions) -> MultiViewBatch:
        loaded = [self.load_sample(i) for i in positions]
        records = [self.records[i] for i in positions]
        return MultiViewBatch(
            images=Tensor(np.stack([imgs for imgs, _ in loaded]), dtype=np.float32),
            masks=np.stack([m for _, m in loaded]).astype(np.uint8),
            image_labels=np.array([r["image_labels"] for r in records], dtype=np.int8),
            sample_labels=np.array([r["sample_label"] for r in records], dtype=np.int8),
            sample_ids=[r["id"] for r in records],
            categories=[r["category"] for r in records],
        )

    def batches(
        self, batch_samples: int, *, shuffle: bool = False, seed=None
    ) -> Iterator[MultiViewBatch]:
        """Yield batches of whole samples; a sample's views never span two batches."""
        if batch_samples < 1:
            raise ConfigError(f"batch_samples must be >= 1, got {batch_samples}")
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(order), batch_samples):
            yield self.batch(order[start : start + batch_samples].tolist())


def load(root: str | Path, split: str = "train") -> MultiViewDataset:
    return MultiViewDataset(root, split, read_manifest(root))


def export_png(root: str | Path, out: str | Path) -> list[Path]:
    """Write every view and mask as PNG for eyeballing; the MVT1 files stay canonical."""
    from matplotlib import image as mpimg

    manifest = read_manifest(root)
    written = []
    for split in SPLITS:
        dataset = MultiViewDataset(root, split, manifest)
        for position, sample_id in enumerate(dataset.sample_ids):
            images, masks = dataset.load_sample(position)
            target = Path(out) / split / f"{sample_id:05d}"
            target.mkdir(parents=True, exist_ok=True)
            for j in range(images.shape[0]):
                view_png = target / f"{j}.png"
                mask_png = target / f"{j}.mask.png"
                rgb = np.clip(images[j].transpose(1, 2, 0), 0.0, 1.0)
                mpimg.imsave(view_png, rgb, metadata={"Software": None})
                mpimg.imsave(
                    mask_png, masks[j], cmap="gray", vmin=0, vmax=1, metadata={"Software": None}
                )
                written.extend([view_png, mask_png])
    logger.info(f"Exported {len(written)} PNG files to {out}")
    return written
