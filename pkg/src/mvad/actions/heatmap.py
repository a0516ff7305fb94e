"""PNG triptychs (input | anomaly map | ground-truth overlay) for one sample's views."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib import image as mpimg

from mvad.conf import get_setting
from mvad.errors import CompatibilityError
from mvad.model import MvadModel
from mvad.pipeline import anomaly_maps, forward
from mvad.synthdata import read_sample_dir
from mvad.tensor import Tensor, no_grad, precision

logger = logging.getLogger(__name__)

_SEPARATOR = 2
_MASK_COLOR = np.array([1.0, 0.0, 0.0])


def colorize(score_map: np.ndarray) -> np.ndarray:
    """RGB rendering of a score map on the fixed score range, so runs stay comparable."""
    low, high = get_setting("HEATMAP_RANGE")
    cmap = matplotlib.colormaps[get_setting("HEATMAP_COLORMAP")]
    scaled = np.clip((np.asarray(score_map, dtype=np.float64) - low) / (high - low), 0.0, 1.0)
    return cmap(scaled)[..., :3]


def overlay_mask(rgb: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    out = rgb.copy()
    hit = np.asarray(mask) != 0
    out[hit] = (1.0 - alpha) * out[hit] + alpha * _MASK_COLOR
    return out


def triptych(image: np.ndarray, score_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``image[3, H, W]``, ``score_map[H, W]``, ``mask[H, W]`` → RGB ``[H, 3W + 2s, 3]``."""
    rgb = np.clip(image.transpose(1, 2, 0).astype(np.float64), 0.0, 1.0)
    gap = np.ones((rgb.shape[0], _SEPARATOR, 3))
    return np.concatenate([rgb, gap, colorize(score_map), gap, overlay_mask(rgb, mask)], axis=1)


def sample_maps(model: MvadModel, images: np.ndarray) -> np.ndarray:
    """Anomaly maps ``[v, H, W]`` for one sample's views ``[v, 3, H, W]``."""
    config = model.config
    v, _, h, w = images.shape
    if v != config.views or h != config.image_size or w != config.image_size:
        raise CompatibilityError(
            f"sample has v={v}, {h}x{w}; model expects v={config.views}, {config.image_size}px"
        )
    with precision(model.dtype.name), no_grad():
        f_e, f_d = forward(model, Tensor(images[None]))
        maps = anomaly_maps(
            f_e,
            f_d,
            h,
            w,
            eps=config.cos_eps,
            combine=config.map_combine,
            smoothing_sigma=config.smoothing_sigma if config.smoothing else None,
        )
    return maps


def render_heatmaps(model: MvadModel, sample_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Write ``view{j}.png`` for every view of the sample in ``sample_dir``."""
    images, masks = read_sample_dir(sample_dir)
    maps = sample_maps(model, images)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for j in range(images.shape[0]):
        path = out_dir / f"view{j}.png"
        mpimg.imsave(path, triptych(images[j], maps[j], masks[j]), metadata={"Software": None})
        written.append(path)
    logger.info(f"Wrote {len(written)} heatmaps to {out_dir}")
    return written
