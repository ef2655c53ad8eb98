"""Logging configuration."""

import logging
import os
import sys
from typing import Optional

LOG_LEVEL_ENV = "GENANALYSIS_LOG_LEVEL"


def setup_logger(name: str, level: Optional[int] = None) -> logging.Logger:
    """
    Create and configure a logger.

    Progress goes to stderr so stdout stays free for machine-readable results.

    Args:
        name: Logger name (typically __name__)
        level: Logging level (defaults to $GENANALYSIS_LOG_LEVEL or INFO)

    Returns:
        Configured logger instance
    """
    if level is None:
        level = logging.getLevelName(os.getenv(LOG_LEVEL_ENV, "INFO").upper())
        if not isinstance(level, int):
            level = logging.INFO

    logger = logging.getLogger(name)
    logger.setLevel(level)

    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(level)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        handler.setFormatter(formatter)

        logger.addHandler(handler)

    return logger
