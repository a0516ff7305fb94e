"""Run configuration: presets, config files, flag overrides, and the MVAS_SEED override."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from mvad.errors import ConfigError

logger = logging.getLogger(__name__)

_DEFAULTS = {
    "PRESET": "desk",
    "SEED_ENV": "MVAS_SEED",
    "DATASET_FORMAT_VERSION": 1,
    "CHECKPOINT_FORMAT_VERSION": 1,
    "HEATMAP_RANGE": (0.0, 2.0),
    "HEATMAP_COLORMAP": "jet",
}


def get_setting(name: str):
    """Get an mvad setting, falling back to defaults.

    Reads ``MVAD_<NAME>`` from the environment if set (strings only).
    """
    env = os.environ.get(f"MVAD_{name}")
    if env is not None:
        return env
    return _DEFAULTS[name]


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Serialized into every artifact the CLI writes."""

    seed: int = 7
    dataset: str = "data"
    output_dir: str = "runs"
    image_size: int = 64
    views: int = 5
    teacher_channels: tuple[int, ...] = (16, 32, 64)
    window_sizes: tuple[int, ...] = (4, 4, 4)
    top_k: tuple[int, ...] = (8, 16, 32)
    blocks: tuple[int, ...] = (1, 1, 2)
    bottleneck_channels: int = 64
    selection_projection: bool = False
    lr: float = 0.002
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_samples: int = 2
    train_dtype: str = "float32"
    category: str | None = None
    pro_fpr_limit: float = 0.3
    pro_thresholds: int = 100  # 0: every distinct score
    smoothing: bool = False
    smoothing_sigma: float = 4.0
    # Conventions the method leaves open; recorded so reports are self-describing.
    ln_eps: float = 1e-5
    cos_eps: float = 1e-8
    loss_spatial: str = "stage"
    map_combine: str = "mean"
    fpn_wiring: str = "downsample-concat-project"

    @property
    def stage_sizes(self) -> tuple[int, int, int]:
        s = self.image_size
        return (s // 4, s // 8, s // 16)

    def effective_top_k(self) -> tuple[int, ...]:
        """k_j capped at (v−1)·a_j², the number of candidate windows."""
        capped = []
        for j, (a, k) in enumerate(zip(self.window_sizes, self.top_k)):
            limit = (self.views - 1) * a * a
            if k > limit:
                logger.warning(f"Stage {j + 1}: top_k={k} capped to {limit}")
            capped.append(min(k, limit))
        return tuple(capped)

    def validate(self) -> RunConfig:
        if self.views < 2:
            raise ConfigError(f"multi-view runs need views >= 2, got {self.views}")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError(f"image_size must be a multiple of 16, got {self.image_size}")
        for name in ("teacher_channels", "window_sizes", "top_k", "blocks"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs 3 entries, got {getattr(self, name)}")
        c1, c2, c3 = self.teacher_channels
        if c1 < 2 or c1 % 2 or c2 != 2 * c1 or c3 != 2 * c2:
            raise ConfigError(
                f"teacher_channels must be even and double per stage, got {self.teacher_channels}"
            )
        for j, (size, a) in enumerate(zip(self.stage_sizes, self.window_sizes)):
            if a < 1 or size % a:
                raise ConfigError(f"stage {j + 1}: window grid a={a} must divide map size {size}")
        if min(self.top_k) < 1 or min(self.blocks) < 0:
            raise ConfigError("top_k entries must be >= 1 and blocks entries >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings lr={self.lr}, wd={self.weight_decay}")
        if self.epochs < 0 or self.batch_samples < 1:
            raise ConfigError(f"invalid epochs={self.epochs} / batch_samples={self.batch_samples}")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"train_dtype must be float32 or float64, got {self.train_dtype}")
        if not 0 < self.pro_fpr_limit <= 1:
            raise ConfigError(f"pro_fpr_limit must be in (0, 1], got {self.pro_fpr_limit}")
        if self.pro_thresholds == 1 or self.pro_thresholds < 0:
            raise ConfigError("pro_thresholds must be >= 2, or 0 for every distinct score")
        if self.map_combine not in ("mean", "sum"):
            raise ConfigError(f"map_combine must be mean or sum, got {self.map_combine}")
        return self

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **_coerce_all(changes))


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper-scale": {
        "image_size": 256,
        "teacher_channels": (64, 128, 256),
        "window_sizes": (8, 8, 8),
        "top_k": (16, 32, 64),
        "blocks": (1, 2, 4),
        "bottleneck_channels": 512,
        "lr": 0.005,
        "weight_decay": 1e-4,
        "epochs": 100,
        "batch_samples": 4,
    },
}


def preset(name: str) -> RunConfig:
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ConfigError(f"Unknown preset '{name}'. Available: {sorted(PRESETS)}")
    return RunConfig(**overrides)


_FIELD_DEFAULTS = {f.name: f.default for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name not in _FIELD_DEFAULTS:
        raise ConfigError(f"Unknown config key '{name}'. Known keys: {sorted(_FIELD_DEFAULTS)}")
    default = _FIELD_DEFAULTS[name]
    try:
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [part for part in value.replace(" ", "").split(",") if part]
            return tuple(int(part) for part in value)
        if isinstance(default, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            return None if value in (None, "", "none", "None") else str(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value {value!r} for config key '{name}'") from e


def _coerce_all(values: Mapping[str, Any]) -> dict[str, Any]:
    return {name: _coerce(name, value) for name, value in values.items()}


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a config file: JSON if it parses as an object, else ``key=value`` lines."""
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        return _coerce_all(data)

    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return _coerce_all(values)


def build_config(
    preset_name: str | None = None,
    *,
    config_file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Layer preset < config file < flag overrides < MVAS_SEED, then validate."""
    config = preset(preset_name or get_setting("PRESET"))
    if config_file is not None:
        config = dataclasses.replace(config, **load_config(config_file))
    if overrides:
        present = {k: v for k, v in overrides.items() if v is not None}
        config = dataclasses.replace(config, **_coerce_all(present))
    environ = os.environ if environ is None else environ
    seed = environ.get(get_setting("SEED_ENV"))
    if seed is not None:
        config = dataclasses.replace(config, seed=_coerce("seed", seed))
        logger.info(f"Seed overridden from environment: {config.seed}")
    return config.validate()
