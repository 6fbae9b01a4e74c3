"""Console and logging helpers for the sigeval CLI."""

import logging
import sys
from typing import Any, Dict, NoReturn

import click
import colorama

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Windows consoles need ANSI translation for click.style colours.
colorama.just_fix_windows_console()


def error_exit(message: str, exit_code: int = 1) -> NoReturn:
    """Print error message and exit.

    Args:
        message: Error message to display
        exit_code: Exit code (default: 1)
    """
    click.echo(click.style(f"Error: {message}", fg="red"), err=True)
    sys.exit(exit_code)


def success_message(message: str) -> None:
    """Print success message in green.

    Args:
        message: Success message to display
    """
    click.echo(click.style(message, fg="green"))


def warning_message(message: str) -> None:
    """Print warning message in yellow.

    Args:
        message: Warning message to display
    """
    click.echo(click.style(f"Warning: {message}", fg="yellow"))


def info_message(message: str) -> None:
    """Print info message in bright cyan.

    Args:
        message: Info message to display
    """
    click.echo(click.style(message, fg="bright_cyan"))


def setup_logging(verbosity: int) -> None:
    """Configure the root logger from the number of ``-v`` flags.

    Args:
        verbosity: 0 for warnings only, 1 for info, 2 or more for debug
    """
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def load_toml(path: str) -> Dict[str, Any]:
    """Parse a TOML file.

    Raises:
        OSError: If the file cannot be read
        ValueError: If the content is not valid TOML
    """
    with open(path, "rb") as f:
        return tomllib.load(f)
