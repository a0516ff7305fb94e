"""Shared plumbing for the ``mvad`` subcommands."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, TextIO

from mvad.conf import RunConfig, build_config
from mvad.errors import (
    CompatibilityError,
    ConfigError,
    DivergenceError,
    MvadError,
    NonFiniteError,
    ShapeError,
    TimerResolutionError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_COMPATIBILITY = 5


class CommandError(Exception):
    """A command failed; ``code`` is the process exit status."""

    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, CommandError):
        return error.code
    if isinstance(error, (ConfigError, ShapeError)):
        return EXIT_VALIDATION
    if isinstance(error, (DivergenceError, NonFiniteError, TimerResolutionError)):
        return EXIT_NUMERICAL
    if isinstance(error, CompatibilityError):
        return EXIT_COMPATIBILITY
    if isinstance(error, OSError):
        return EXIT_IO
    return 1


class OutputWrapper:
    """Line-oriented writer around a text stream."""

    def __init__(self, out: TextIO):
        self._out = out

    def write(self, msg: str = "", ending: str = "\n") -> None:
        if ending and not msg.endswith(ending):
            msg += ending
        self._out.write(msg)


class BaseCommand:
    """One subcommand: ``add_arguments`` declares flags, ``handle`` does the work.

    ``execute`` turns every library error into a :class:`CommandError` carrying
    the documented exit code, so ``handle`` can let them propagate.
    """

    help = ""

    def __init__(self, stdout: TextIO | None = None, stderr: TextIO | None = None):
        self.stdout = OutputWrapper(stdout or sys.stdout)
        self.stderr = OutputWrapper(stderr or sys.stderr)

    def add_arguments(self, parser) -> None:
        pass

    def handle(self, **options) -> None:
        raise NotImplementedError("subclasses of BaseCommand must provide a handle() method")

    def execute(self, **options) -> int:
        try:
            self.handle(**options)
        except CommandError:
            raise
        except (MvadError, OSError) as e:
            raise CommandError(str(e), exit_code_for(e)) from e
        return EXIT_OK

    def run_config(self, options: dict[str, Any], **overrides) -> RunConfig:
        """Preset, then ``--config`` file, then the given flag overrides, then MVAS_SEED."""
        return build_config(
            options.get("preset"),
            config_file=options.get("config"),
            overrides=overrides,
        )


def write_json(path: str | Path, data: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path

