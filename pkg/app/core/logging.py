"""Logging setup: one RichHandler on the root logger, module loggers everywhere else."""

import logging

from rich.logging import RichHandler

_CONFIGURED = False


def configure_logging(level: str = "INFO") -> None:
    """Install the rich console handler once; later calls only change the level."""
    global _CONFIGURED
    root = logging.getLogger()
    root.setLevel(level.upper())
    if _CONFIGURED:
        return
    handler = RichHandler(rich_tracebacks=True, show_path=False, markup=False)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s", datefmt="[%X]"))
    root.addHandler(handler)
    # matplotlib chatters at DEBUG about font discovery
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    _CONFIGURED = True
