"""Export anomaly-map triptychs for one sample."""

from __future__ import annotations

from mvad.actions.heatmap import render_heatmaps
from mvad.commands.base import BaseCommand
from mvad.model import load_checkpoint


class Command(BaseCommand):
    help = "Write one PNG per view: input, anomaly map on a fixed [0, 2] scale, mask overlay."

    def add_arguments(self, parser):
        parser.add_argument("sample_dir", help="Sample directory, e.g. data/test/00003.")
        parser.add_argument("--checkpoint", required=True, help="Checkpoint directory.")
        parser.add_argument("--out", required=True, help="Directory for view{j}.png files.")

    def handle(self, **options):
        model = load_checkpoint(options["checkpoint"])
        written = render_heatmaps(model, options["sample_dir"], options["out"])
        for path in written:
            self.stdout.write(str(path))
