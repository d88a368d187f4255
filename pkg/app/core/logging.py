"""
Logging setup
=============

Routes stdlib loggers through structlog's ProcessorFormatter so that
``logging.getLogger(__name__)`` calls across the package render either as
JSON lines or as console output, depending on LOG_FORMAT.
"""

import logging
import sys
from typing import Optional

import structlog

from app.core.config import get_settings

_CONFIGURED = False


def configure_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """
    Configure the root logger once per process

    Args:
        level: Log level name; defaults to settings.LOG_LEVEL
        fmt: "json" or "console"; defaults to settings.LOG_FORMAT
    """
    global _CONFIGURED
    settings = get_settings()
    level = (level or settings.LOG_LEVEL).upper()
    fmt = (fmt or settings.LOG_FORMAT).lower()

    shared_processors = [
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt="iso", utc=True),
    ]
    renderer = (
        structlog.processors.JSONRenderer()
        if fmt == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    )

    structlog.configure(
        processors=shared_processors + [structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    formatter = structlog.stdlib.ProcessorFormatter(
        foreign_pre_chain=shared_processors,
        processors=[structlog.stdlib.ProcessorFormatter.remove_processors_meta, renderer],
    )
    # stderr keeps stdout clean for CLI results
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)

    root = logging.getLogger()
    if _CONFIGURED:
        for existing in list(root.handlers):
            if getattr(existing, "_driftlab", False):
                root.removeHandler(existing)
    handler._driftlab = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(level)
    _CONFIGURED = True
