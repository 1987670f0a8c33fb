"""
Logging setup: one rich handler on the package root logger.
"""

import logging

from rich.console import Console
from rich.logging import RichHandler

ROOT_LOGGER = "cwe_remap"
# the download helpers log under their own package
LIB_LOGGER = "lib"


def get_logger(name: str) -> logging.Logger:
    """Return a logger below the package root.

    Args:
        name: Usually ``__name__`` of the calling module.
    """
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def configure_logging(level: int | str = logging.INFO, console: Console | None = None) -> None:
    """Install a single RichHandler on the package root loggers.

    Calling it again replaces the previous handler, so the CLI and tests can
    both call it freely.

    Args:
        level: Logging level for the package.
        console: Console the handler writes to (stderr by default).
    """
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    for name in (ROOT_LOGGER, LIB_LOGGER):
        root = logging.getLogger(name)
        for old in list(root.handlers):
            if isinstance(old, RichHandler):
                root.removeHandler(old)
        root.addHandler(handler)
        root.setLevel(level)
