"""Generate a synthetic multi-view dataset."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any

from mvad.commands.base import BaseCommand
from mvad.conf import get_setting
from mvad.errors import InvalidSpecError
from mvad.synthdata import DatasetSpec, export_png, generate, read_manifest

# flag dest -> DatasetSpec field
_SPEC_FLAGS = {
    "seed": "seed",
    "p_train": "p_train",
    "p_test_normal": "p_test_normal",
    "p_test_anom": "p_test_anom",
    "views": "views",
    "resolution": "resolution",
    "views_affected": "views_affected",
    "kinds": "anomaly_kinds",
    "categories": "categories",
}


def read_spec_file(path: str | Path) -> dict[str, Any]:
    """A dataset spec file: a JSON object, or ``key=value`` lines with ``#`` comments."""
    text = Path(path).read_text()
    if text.strip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidSpecError(f"Spec file {path} is not valid JSON: {e}") from e

    defaults = {f.name: f.default for f in dataclasses.fields(DatasetSpec)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in defaults:
            raise InvalidSpecError(f"{path}:{lineno}: expected a spec key=value, got {line!r}")
        if isinstance(defaults[key], tuple):
            values[key] = [part.strip() for part in value.split(",") if part.strip()]
        else:
            try:
                values[key] = int(value)
            except ValueError:
                raise InvalidSpecError(f"{path}:{lineno}: {key} must be an integer")
    return values


class Command(BaseCommand):
    help = "Generate a seeded synthetic multi-view dataset (idempotent for an identical spec)."

    def add_arguments(self, parser):
        parser.add_argument("--spec", help="Dataset spec file (JSON or key=value).")
        parser.add_argument("--out", help="Dataset directory (default: the config's dataset).")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--p-train", type=int, help="Normal training samples.")
        parser.add_argument("--p-test-normal", type=int, help="Normal test samples.")
        parser.add_argument("--p-test-anom", type=int, help="Anomalous test samples.")
        parser.add_argument(
            "--anomaly-rate",
            type=float,
            help="Re-divide the test split so this fraction is anomalous (0 allowed).",
        )
        parser.add_argument("--views", type=int, help="Views per sample (>= 2).")
        parser.add_argument("--resolution", type=int, help="Image side in pixels.")
        parser.add_argument("--views-affected", type=int, help="Views painted per anomaly.")
        parser.add_argument("--kinds", nargs="+", help="Anomaly kinds: blob scratch hole.")
        parser.add_argument("--categories", nargs="+", help="Object families: nut plate washer.")
        parser.add_argument(
            "--force",
            action="store_true",
            help="Overwrite a different dataset already at --out.",
        )
        parser.add_argument("--png", help="Also export every view as PNG into this directory.")

    def handle(self, **options):
        config = self.run_config(options)
        spec = self.build_spec(options, config.seed, config.views, config.image_size)
        out = Path(options.get("out") or config.dataset)

        manifest_path = generate(spec, out, force=options.get("force", False))
        manifest = read_manifest(out)
        counts = manifest["counts"]
        self.stdout.write(f"Dataset: {out}")
        self.stdout.write(f"  seed: {manifest['seed']}")
        self.stdout.write(f"  views: {counts['views']}  resolution: {spec.resolution}")
        self.stdout.write(f"  train samples: {counts['train']}")
        self.stdout.write(
            f"  test samples: {counts['test']} ({counts['test_anomalous']} anomalous)"
        )
        self.stdout.write(f"  images: {counts['images']}")
        self.stdout.write(f"  manifest: {manifest_path}")

        if options.get("png"):
            written = export_png(out, options["png"])
            self.stderr.write(f"Exported {len(written)} PNG files to {options['png']}")

    def build_spec(
        self, options: dict[str, Any], seed: int, views: int, resolution: int
    ) -> DatasetSpec:
        """Run config < spec file < flags < MVAS_SEED."""
        values: dict[str, Any] = {"seed": seed, "views": views, "resolution": resolution}
        if options.get("spec"):
            values.update(read_spec_file(options["spec"]))
        for dest, name in _SPEC_FLAGS.items():
            if options.get(dest) is not None:
                values[name] = options[dest]
        if get_setting("SEED_ENV") in os.environ:
            values["seed"] = seed
        spec = DatasetSpec.from_dict(values)
        if options.get("anomaly_rate") is not None:
            spec = spec.with_anomaly_rate(options["anomaly_rate"])
        return spec.validate()
