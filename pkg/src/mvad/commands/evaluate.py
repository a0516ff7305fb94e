"""Evaluate a checkpoint: the ten-metric report and the per-sample score dump."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Sequence

from mvad.commands.base import BaseCommand, write_json
from mvad.model import load_checkpoint
from mvad.pipeline import evaluate
from mvad.synthdata import SPLITS, load


def write_scores(rows: Sequence[dict[str, Any]], path: str | Path) -> Path:
    """One line per sample: ids, labels, the sample score and every view's image score."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    views = len(rows[0]["image_scores"]) if rows else 0
    header = ["sample_id", "category", "sample_label", "sample_score"]
    for j in range(views):
        header += [f"view{j}_label", f"view{j}_score"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            line = [row["sample_id"], row["category"], row["sample_label"]]
            line.append(repr(row["sample_score"]))
            for label, score in zip(row["image_labels"], row["image_scores"]):
                line += [label, repr(score)]
            writer.writerow(line)
    return path


class Command(BaseCommand):
    help = "Score a dataset split with a trained checkpoint and write the metric report."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True, help="Checkpoint directory.")
        parser.add_argument("--dataset", help="Dataset directory (default: config dataset).")
        parser.add_argument("--split", choices=sorted(SPLITS), default="test")
        parser.add_argument(
            "--out",
            help="Report JSON path (default: <checkpoint>/../report.json).",
        )
        parser.add_argument(
            "--scores",
            help="Per-sample score CSV path (default: next to the report as scores.csv).",
        )
        parser.add_argument("--category", help="Single-class setting: evaluate one category.")
        parser.add_argument(
            "--pro-thresholds",
            type=int,
            help="Uniform PRO threshold count; 0 uses every distinct score.",
        )
        parser.add_argument("--pro-fpr-limit", type=float, help="PRO integration cap on FPR.")
        parser.add_argument(
            "--smoothing",
            action="store_true",
            default=None,
            help="Gaussian-smooth the anomaly maps before scoring.",
        )
        parser.add_argument(
            "--decoder-override",
            choices=["teacher"],
            help="Replace the decoder output by the encoder features (all-zero maps).",
        )

    def handle(self, **options):
        checkpoint = Path(options["checkpoint"])
        model = load_checkpoint(checkpoint)
        eval_changes = {
            "category": options.get("category"),
            "pro_thresholds": options.get("pro_thresholds"),
            "pro_fpr_limit": options.get("pro_fpr_limit"),
            "smoothing": options.get("smoothing"),
        }
        config = model.config.replace(
            **{k: v for k, v in eval_changes.items() if v is not None}
        ).validate()
        dataset_root = options.get("dataset") or config.dataset
        dataset = load(dataset_root, options["split"])

        result = evaluate(model, dataset, config, decoder_override=options.get("decoder_override"))
        report = dict(result.report)
        report["dataset"] = str(dataset_root)
        report["split"] = options["split"]
        report["checkpoint_config_hash"] = model.config.config_hash()

        out = Path(options.get("out") or checkpoint.parent / "report.json")
        write_json(out, report)
        scores = write_scores(result.rows, options.get("scores") or out.with_name("scores.csv"))

        for level, values in report["metrics"].items():
            shown = "  ".join(
                f"{name}={'null' if value is None else f'{value:.4f}'}"
                for name, value in values.items()
            )
            self.stdout.write(f"{level:>6}: {shown}")
        for key, reason in report["undefined"].items():
            self.stderr.write(f"{key} undefined: {reason}")
        self.stdout.write(f"Report: {out}")
        self.stdout.write(f"Scores: {scores}")
