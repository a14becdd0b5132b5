"""Logging configuration for the command-line entry point."""
import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

from qhmm.config import Settings

TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def configure_logging(settings: Settings, level: Optional[str] = None) -> logging.Handler:
    """
    Configure the root logger once.

    Logs go to stderr so that stdout stays free for command output.

    Args:
        settings: Application settings (log_format, log_level)
        level: Optional level override, e.g. from a command-line flag

    Returns:
        The installed handler
    """
    handler = logging.StreamHandler(sys.stderr)
    if settings.log_format == "json":
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel((level or settings.log_level).upper())
    return handler
