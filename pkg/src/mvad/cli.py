"""``mvad`` command line: generate | train | eval | heatmap | bench.

Exit codes: 0 success, 2 validation, 3 IO, 4 numerical failure, 5 compatibility.
"""

from __future__ import annotations

import argparse
import importlib
import logging
import sys
from typing import Sequence, TextIO

from mvad import __version__
from mvad.commands import COMMANDS
from mvad.commands.base import EXIT_VALIDATION, CommandError
from mvad.conf import PRESETS

logger = logging.getLogger(__name__)

_LOG_LEVELS = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}


def _global_options(*, suppress: bool = False) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand name.

    The subcommand copy uses SUPPRESS defaults so it never overwrites a value
    given before the subcommand.
    """
    parent = argparse.ArgumentParser(add_help=False)

    def default(value):
        return argparse.SUPPRESS if suppress else value

    parent.add_argument(
        "-v",
        "--verbosity",
        type=int,
        choices=sorted(_LOG_LEVELS),
        default=default(0),
        help="0 warnings, 1 lifecycle events, 2 per-step detail (default: 0).",
    )
    parent.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default=default(None),
        help="Base configuration (default: desk).",
    )
    parent.add_argument(
        "--config",
        default=default(None),
        help="Config file (JSON or key=value); flags override it.",
    )
    return parent


def build_parser(stdout: TextIO | None = None, stderr: TextIO | None = None):
    """The top-level parser and one ``Command`` instance per subcommand."""
    parent = _global_options()
    sub_parent = _global_options(suppress=True)
    parser = argparse.ArgumentParser(
        prog="mvad",
        description="Multi-view anomaly detection with windowed adaptive-selection attention.",
        parents=[parent],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands = {}
    for name, module_path in COMMANDS.items():
        command = importlib.import_module(module_path).Command(stdout=stdout, stderr=stderr)
        sub = subparsers.add_parser(
            name, help=command.help, description=command.help, parents=[sub_parent]
        )
        command.add_arguments(sub)
        commands[name] = command
    return parser, commands


def main(
    argv: Sequence[str] | None = None,
    stdout: TextIO | None = None,
    stderr: TextIO | None = None,
) -> int:
    parser, commands = build_parser(stdout, stderr)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code else 0
    if args.command is None:
        parser.print_help(stderr or sys.stderr)
        return EXIT_VALIDATION

    logging.basicConfig(
        level=_LOG_LEVELS[args.verbosity],
        format="%(levelname)s %(name)s: %(message)s",
    )
    options = vars(args)
    command = commands[options.pop("command")]
    try:
        return command.execute(**options)
    except CommandError as e:
        command.stderr.write(f"Error: {e}")
        return e.code


if __name__ == "__main__":
    sys.exit(main())
