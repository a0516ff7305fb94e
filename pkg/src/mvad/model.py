"""Network components of the MVAD model and their checkpoint format.

The teacher encoder is a frozen, seeded 3-stage CNN whose weights are plain
tensors (never :class:`Parameter`), so no gradient can reach them. The
trainable parts are the per-stage MVAS blocks, the FPN-style fusion and the
student decoder.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from mvad import ops
from mvad.conf import RunConfig, get_setting
from mvad.errors import CompatibilityError
from mvad.mvas import MvasBlockParams, init_block_params
from mvad.optim import Parameter
from mvad.serialize import load_tensor, save_tensor
from mvad.tensor import Tensor, no_grad, precision

logger = logging.getLogger(__name__)

# Independent seed streams so adding a trainable layer never reshuffles the teacher.
_TEACHER_STREAM = 0
_STUDENT_STREAM = 1

MANIFEST_NAME = "manifest.txt"


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 1

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        *,
        kernel: int = 3,
        stride: int = 1,
        bias_std: float = 0.0,
    ) -> ConvLayer:
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        weight = rng.normal(0.0, std, (c_out, c_in, kernel, kernel))
        bias = rng.normal(0.0, bias_std, c_out) if bias_std else np.zeros(c_out)
        return cls(Tensor(weight), Tensor(bias), stride=stride, pad=kernel // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class TeacherEncoder:
    """Stride-2 stem, then per stage a stride-2 conv and a stride-1 conv, each with relu."""

    stem: ConvLayer
    stages: list[tuple[ConvLayer, ConvLayer]]

    @classmethod
    def init(cls, channels: tuple[int, ...], rng: np.random.Generator) -> TeacherEncoder:
        stem = ConvLayer.init(rng, 3, channels[0], stride=2, bias_std=0.1)
        stages = []
        c_prev = channels[0]
        for c in channels:
            down = ConvLayer.init(rng, c_prev, c, stride=2, bias_std=0.1)
            conv = ConvLayer.init(rng, c, c, bias_std=0.1)
            stages.append((down, conv))
            c_prev = c
        return cls(stem=stem, stages=stages)

    def __call__(self, images: Tensor) -> list[Tensor]:
        with no_grad():
            x = ops.relu(self.stem(images))
            feats = []
            for down, conv in self.stages:
                x = ops.relu(conv(ops.relu(down(x))))
                feats.append(x)
        return feats

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for key, t in self.stem.tensors().items():
            yield f"teacher.stem.{key}", t
        for j, (down, conv) in enumerate(self.stages, start=1):
            for part, layer in (("down", down), ("conv", conv)):
                for key, t in layer.tensors().items():
                    yield f"teacher.stage{j}.{part}.{key}", t


@dataclass
class FusionNeck:
    """Downsample-concat-project fusion of the three enhanced stages into one bottleneck."""

    down1: ConvLayer
    down2: ConvLayer
    project: ConvLayer

    @classmethod
    def init(
        cls, channels: tuple[int, ...], bottleneck: int, rng: np.random.Generator
    ) -> FusionNeck:
        c1, c2, c3 = channels
        return cls(
            down1=ConvLayer.init(rng, c1, c1, stride=2),
            down2=ConvLayer.init(rng, c1 + c2, c2, stride=2),
            project=ConvLayer.init(rng, c2 + c3, bottleneck, kernel=1),
        )

    def __call__(self, stages: list[Tensor]) -> Tensor:
        f1, f2, f3 = stages
        x = ops.concat([ops.relu(self.down1(f1)), f2], dim=1)
        x = ops.concat([ops.relu(self.down2(x)), f3], dim=1)
        return self.project(x)

    def layers(self) -> dict[str, ConvLayer]:
        return {"down1": self.down1, "down2": self.down2, "project": self.project}


@dataclass
class StudentDecoder:
    """Mirror of the teacher: per stage (deepest first) an optional ×2 nearest
    upsample, conv + relu, then a linear conv emitting f_D at that stage."""

    stages: list[tuple[ConvLayer, ConvLayer]]

    @classmethod
    def init(
        cls, channels: tuple[int, ...], bottleneck: int, rng: np.random.Generator
    ) -> StudentDecoder:
        stages = []
        c_prev = bottleneck
        for c in reversed(channels):
            stages.append((ConvLayer.init(rng, c_prev, c), ConvLayer.init(rng, c, c)))
            c_prev = c
        return cls(stages=stages)

    def __call__(self, bottleneck: Tensor) -> list[Tensor]:
        outputs = []
        x = bottleneck
        for i, (conv1, conv2) in enumerate(self.stages):
            if i:
                x = ops.upsample_nearest(ops.relu(outputs[-1]), 2)
            outputs.append(conv2(ops.relu(conv1(x))))
        return outputs[::-1]

    def layers(self) -> dict[str, ConvLayer]:
        n = len(self.stages)
        named = {}
        for i, (conv1, conv2) in enumerate(self.stages):
            named[f"stage{n - i}.conv1"] = conv1
            named[f"stage{n - i}.conv2"] = conv2
        return named


@dataclass
class MvadModel:
    """Frozen teacher + MVAS stages + fusion neck + student decoder.

    Usage:
        model = MvadModel.init(config)
        opt = AdamW(model.parameters(), lr=config.lr)
    """

    config: RunConfig
    teacher: TeacherEncoder
    mvas_stages: list[list[MvasBlockParams]]
    neck: FusionNeck
    decoder: StudentDecoder
    _params: dict[str, Parameter] = field(init=False, repr=False)

    def __post_init__(self):
        self._params = {}
        for j, blocks in enumerate(self.mvas_stages, start=1):
            for b, block in enumerate(blocks):
                for name, param in block.named_parameters():
                    param.name = f"mvas.stage{j}.block{b}.{name}"
                    param.tensor.name = param.name
                    self._params[param.name] = param
        for prefix, layers in (("neck", self.neck.layers()), ("decoder", self.decoder.layers())):
            for lname, layer in layers.items():
                for key, t in layer.tensors().items():
                    name = f"{prefix}.{lname}.{key}"
                    t.name = name
                    self._params[name] = Parameter(t, name=name)

    @classmethod
    def init(cls, config: RunConfig, dtype: str | None = None) -> MvadModel:
        """Seeded construction; parameters are created in ``dtype`` (default: train dtype)."""
        config.validate()
        with precision(dtype or config.train_dtype):
            teacher_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, _TEACHER_STREAM])
            )
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STUDENT_STREAM]))
            channels = config.teacher_channels
            teacher = TeacherEncoder.init(channels, teacher_rng)
            mvas_stages = [
                [
                    init_block_params(
                        c, size, size, rng, selection_projection=config.selection_projection
                    )
                    for _ in range(n_blocks)
                ]
                for c, size, n_blocks in zip(channels, config.stage_sizes, config.blocks)
            ]
            neck = FusionNeck.init(channels, config.bottleneck_channels, rng)
            decoder = StudentDecoder.init(channels, config.bottleneck_channels, rng)
        return cls(config, teacher, mvas_stages, neck, decoder)

    @property
    def dtype(self) -> np.dtype:
        return self.teacher.stem.weight.dtype

    def parameters(self) -> list[Parameter]:
        """Trainable parameters only; the teacher is never included."""
        return list(self._params.values())

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield from self._params.items()

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.teacher.named_tensors()
        for name, param in self._params.items():
            yield name, param.tensor


def count_parameters(model: MvadModel) -> dict[str, int]:
    teacher = sum(t.data.size for _, t in model.teacher.named_tensors())
    trainable = sum(p.tensor.data.size for p in model.parameters())
    return {"teacher": int(teacher), "trainable": int(trainable)}


# -- Checkpoints --


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(n) for n in shape) or "scalar"


def save_checkpoint(model: MvadModel, directory: str | Path) -> Path:
    """Write every tensor as ``{name}.mvt`` plus a ``key=value`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format_version={get_setting('CHECKPOINT_FORMAT_VERSION')}",
        f"config_hash={model.config.config_hash()}",
        f"seed={model.config.seed}",
        f"dtype={model.dtype.name}",
        f"config={json.dumps(model.config.to_dict(), sort_keys=True)}",
    ]
    for name, tensor in model.named_tensors():
        save_tensor(tensor, directory / f"{name}.mvt")
        lines.append(f"tensor.{name}={_shape_str(tensor.shape)}")
    path = directory / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Saved checkpoint to {directory} ({len(lines) - 5} tensors)")
    return path


def read_checkpoint_manifest(directory: str | Path) -> dict[str, str]:
    path = Path(directory) / MANIFEST_NAME
    entries = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CompatibilityError(f"{path}: malformed manifest line {line!r}")
        entries[key] = value
    return entries


def _assign(target: Tensor, arr: np.ndarray, name: str) -> None:
    if arr.shape != target.shape:
        raise CompatibilityError(
            f"tensor {name}: checkpoint shape {arr.shape}, model expects {target.shape}"
        )
    target.data[...] = arr


def load_checkpoint(directory: str | Path, expected: RunConfig | None = None) -> MvadModel:
    """Rebuild the model recorded in ``directory``.

    With ``expected``, the checkpoint's config hash must match it.
    """
    directory = Path(directory)
    manifest = read_checkpoint_manifest(directory)
    version = manifest.get("format_version")
    if version != str(get_setting("CHECKPOINT_FORMAT_VERSION")):
        raise CompatibilityError(f"{directory}: unsupported checkpoint format {version}")
    stored = RunConfig().replace(**json.loads(manifest["config"]))
    if stored.config_hash() != manifest.get("config_hash"):
        raise CompatibilityError(f"{directory}: manifest config does not match its hash")
    if expected is not None and expected.config_hash() != stored.config_hash():
        raise CompatibilityError(
            f"{directory}: checkpoint config {stored.config_hash()} "
            f"does not match run config {expected.config_hash()}"
        )
    model = MvadModel.init(stored, dtype=manifest.get("dtype", stored.train_dtype))
    for name, tensor in model.named_tensors():
        recorded = manifest.get(f"tensor.{name}")
        if recorded != _shape_str(tensor.shape):
            raise CompatibilityError(
                f"tensor {name}: manifest shape {recorded}, model {tensor.shape}"
            )
        _assign(tensor, load_tensor(directory / f"{name}.mvt"), name)
    logger.info(f"Loaded checkpoint {directory} (config {stored.config_hash()})")
    return model


def load_teacher_weights(model: MvadModel, directory: str | Path) -> None:
    """Replace the teacher's tensors with externally supplied ``teacher.*.mvt`` files."""
    directory = Path(directory)
    for name, tensor in model.teacher.named_tensors():
        path = directory / f"{name}.mvt"
        if not path.exists():
            raise CompatibilityError(f"missing teacher tensor {path}")
        _assign(tensor, load_tensor(path), name)
    logger.info(f"Loaded external teacher weights from {directory}")
