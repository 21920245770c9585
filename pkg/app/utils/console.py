"""
Shared rich consoles and loggers.
"""
import logging
import os

from rich.console import Console
from rich.logging import RichHandler

console = Console()
err_console = Console(stderr=True)

_configured = False


def get_logger(name: str) -> logging.Logger:
    """A logger under the 'spatialfusion' root, rendered by rich on stderr."""
    global _configured
    if not _configured:
        root = logging.getLogger("spatialfusion")
        level = os.environ.get("SPATIALFUSION_LOG_LEVEL", "WARNING").upper()
        root.setLevel(level)
        handler = RichHandler(console=err_console, show_path=False, markup=True)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
        root.propagate = False
        _configured = True
    short = name.split(".")[-1]
    return logging.getLogger(f"spatialfusion.{short}")


def set_verbosity(level: str) -> None:
    get_logger("console")
    logging.getLogger("spatialfusion").setLevel(level.upper())
