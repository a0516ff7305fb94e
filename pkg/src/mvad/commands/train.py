"""Train an MVAD model on a generated dataset."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from mvad.actions.visualize import Visualize
from mvad.commands.base import EXIT_NUMERICAL, BaseCommand, CommandError, write_json
from mvad.errors import DivergenceError
from mvad.model import MvadModel, count_parameters, save_checkpoint
from mvad.pipeline import train
from mvad.synthdata import load

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "epoch", "loss")


def write_trace(losses: list[float], steps_per_epoch: int, path: str | Path) -> Path:
    """One row per optimizer step; ``repr`` keeps the loss exact across reruns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for step, loss in enumerate(losses):
            writer.writerow([step, step // steps_per_epoch, repr(loss)])
    return path


class Command(BaseCommand):
    help = "Train the MVAS stages, fusion neck and student decoder; the teacher stays frozen."

    def add_arguments(self, parser):
        parser.add_argument("--dataset", help="Dataset directory (default: config dataset).")
        parser.add_argument(
            "--out",
            help="Run directory for checkpoint/, loss_trace.csv and config.json "
            "(default: <output_dir>/train).",
        )
        parser.add_argument("--seed", type=int)
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--batch-samples", type=int, help="Whole samples per batch.")
        parser.add_argument("--category", help="Single-class setting: train on one category.")
        parser.add_argument(
            "--selection-projection",
            action="store_true",
            default=None,
            help="Add a linear map on window descriptors before the selection.",
        )
        parser.add_argument(
            "--dump-graph",
            metavar="FILE",
            help="Write the first training step's tape as Graphviz DOT.",
        )

    def handle(self, **options):
        config = self.run_config(
            options,
            dataset=options.get("dataset"),
            seed=options.get("seed"),
            epochs=options.get("epochs"),
            lr=options.get("lr"),
            batch_samples=options.get("batch_samples"),
            category=options.get("category"),
            selection_projection=options.get("selection_projection"),
        )
        run_dir = Path(options.get("out") or Path(config.output_dir) / "train")
        dataset = load(config.dataset, "train")

        model = MvadModel.init(config)
        counts = count_parameters(model)
        self.stderr.write(
            f"Training {counts['trainable']} parameters "
            f"(teacher {counts['teacher']}) on {len(dataset)} samples, seed {config.seed}"
        )

        dump_graph = options.get("dump_graph")

        def on_first_step(tape):
            if dump_graph:
                Path(dump_graph).write_text(Visualize().tape(tape) + "\n")
                logger.info(f"Wrote first-step tape graph to {dump_graph}")

        try:
            result = train(model, dataset, config, on_first_step=on_first_step)
        except DivergenceError as e:
            raise CommandError(
                f"Training diverged at step {e.step} (loss={e.loss}): {e}", EXIT_NUMERICAL
            ) from e

        write_json(run_dir / "config.json", {"seed": config.seed, "config": config.to_dict()})
        checkpoint = save_checkpoint(model, run_dir / "checkpoint").parent
        steps_per_epoch = max(1, result.steps // max(1, result.epochs))
        trace = write_trace(result.losses, steps_per_epoch, run_dir / "loss_trace.csv")

        self.stdout.write(f"Steps: {result.steps}")
        if result.losses:
            self.stdout.write(f"Final loss: {result.losses[-1]:.6f}")
        self.stdout.write(f"Checkpoint: {checkpoint}")
        self.stdout.write(f"Loss trace: {trace}")
