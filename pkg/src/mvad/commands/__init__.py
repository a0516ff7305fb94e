"""Subcommands of the ``mvad`` command line; each module defines a ``Command``."""

COMMANDS = {
    "generate": "mvad.commands.generate",
    "train": "mvad.commands.train",
    "eval": "mvad.commands.evaluate",
    "heatmap": "mvad.commands.heatmap",
    "bench": "mvad.commands.bench",
}
