"""Complexity benchmarks and backbone/window/top-k ablations."""

from __future__ import annotations

from pathlib import Path

from mvad.actions.bench import (
    QUIESCENCE_NOTE,
    TOP_K_SQUARE,
    SweepConfig,
    ablation_grid,
    flop_sweep,
    parse_stage_setting,
    time_sweep,
    write_ablation_csv,
    write_csv,
    write_meta,
)
from mvad.commands.base import BaseCommand
from mvad.errors import ConfigError
from mvad.synthdata import load

_SWEEP_FLAGS = ("c", "v", "k", "a", "repeats", "warmup", "threads")


class Command(BaseCommand):
    help = "Sweep MVAS against dense cross-attention (FLOPs or wall time), or run ablations."

    def add_arguments(self, parser):
        parser.add_argument(
            "--hw",
            type=int,
            nargs="+",
            help="Square map sizes h*w to sweep (default: 256 1024 4096 16384).",
        )
        parser.add_argument("--c", type=int, help="Channels (even).")
        parser.add_argument("--v", type=int, help="Views.")
        parser.add_argument("--k", type=int, help="Selected windows per query window.")
        parser.add_argument(
            "--a", type=int, help="Window side (default: divisor-rounded optimum per size)."
        )
        parser.add_argument("--repeats", type=int, help="Timed repeats per point (>= 5).")
        parser.add_argument("--warmup", type=int, help="Untimed warm-up runs per point.")
        parser.add_argument(
            "--threads",
            type=int,
            help="BLAS threads for timing (default: 1); recorded in the .meta.json sibling.",
        )
        parser.add_argument(
            "--flops-only",
            "--dry-run",
            dest="flops_only",
            action="store_true",
            help="Analytic FLOP counts only; byte-deterministic output.",
        )
        parser.add_argument(
            "--ablation",
            action="store_true",
            help="Train and evaluate one model per (width, a, k) cell on the dataset.",
        )
        parser.add_argument(
            "--a-values",
            nargs="+",
            default=["2", "4", "4,2,1"],
            help="Window grids: one int for every stage, or a,b,c per stage.",
        )
        parser.add_argument(
            "--k-values",
            nargs="+",
            default=["a2", "2"],
            help="Top-k: one int, a,b,c per stage, or 'a2' for k = a^2 per stage.",
        )
        parser.add_argument(
            "--widths",
            type=int,
            nargs="+",
            help="First-stage backbone widths c1; channels become (c1, 2c1, 4c1).",
        )
        parser.add_argument("--ablation-epochs", type=int, help="Epochs per ablation cell.")
        parser.add_argument("--dataset", help="Dataset directory for --ablation.")
        parser.add_argument("-o", "--out", help="CSV path (default: <output_dir>/bench.csv).")

    def handle(self, **options):
        config = self.run_config(options, dataset=options.get("dataset"))
        if options.get("ablation"):
            self._ablation(config, options)
            return

        fields = {name: options[name] for name in _SWEEP_FLAGS if options.get(name) is not None}
        if options.get("hw"):
            fields["hw_values"] = tuple(options["hw"])
        sweep = SweepConfig(seed=config.seed, **fields).validate()

        flops_only = options.get("flops_only", False)
        rows = flop_sweep(sweep) if flops_only else time_sweep(sweep)
        out = write_csv(rows, options.get("out") or Path(config.output_dir) / "bench.csv")
        meta = {
            "mode": "flops-only" if flops_only else "timed",
            "threads": sweep.threads or 1,
            "multi_threaded": bool(sweep.threads and sweep.threads > 1),
            "sweep": sweep.to_dict(),
            "seed": config.seed,
            "config": config.to_dict(),
        }
        if not flops_only:
            meta["note"] = QUIESCENCE_NOTE
            self.stderr.write(f"Note: {QUIESCENCE_NOTE}")
        write_meta(out, meta)

        for row in rows:
            self.stdout.write(",".join(row.as_csv_row()))
        self.stdout.write(f"Wrote {len(rows)} rows to {out}")

    def _ablation(self, config, options):
        a_values = [parse_stage_setting(text, "--a-values") for text in options["a_values"]]
        if TOP_K_SQUARE in a_values:
            raise ConfigError(f"--a-values takes window grids, not '{TOP_K_SQUARE}'")
        k_values = [parse_stage_setting(text, "--k-values") for text in options["k_values"]]
        widths = options.get("widths") or [config.teacher_channels[0]]

        train_set = load(config.dataset, "train")
        test_set = load(config.dataset, "test")
        rows = ablation_grid(
            train_set,
            test_set,
            config,
            a_values,
            k_values,
            widths=widths,
            epochs=options.get("ablation_epochs"),
        )
        out = write_ablation_csv(
            rows, options.get("out") or Path(config.output_dir) / "ablation.csv"
        )
        write_meta(
            out,
            {
                "mode": "ablation",
                "widths": list(widths),
                "a_values": [list(a) for a in a_values],
                "k_values": [k if isinstance(k, str) else list(k) for k in k_values],
                "epochs": options.get("ablation_epochs") or config.epochs,
                "seed": config.seed,
                "config": config.to_dict(),
            },
        )
        skipped = sum(1 for r in rows if r.status == "skipped")
        self.stdout.write(f"Ablation: {len(rows) - skipped} cells run, {skipped} skipped")
        self.stdout.write(f"Wrote {out}")
