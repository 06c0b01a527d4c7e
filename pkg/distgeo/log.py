from __future__ import annotations

import os
import sys
from typing import Optional

from loguru import logger

ENV_LEVEL = "DISTGEO_LOG"
_FORMAT = "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <7}</level> | {name}:{function} - {message}"


def configure_logging(level: Optional[str] = None) -> str:
    """
    Install a single stderr sink. Level precedence: argument, $DISTGEO_LOG, INFO.
    Returns the level actually used.
    """
    resolved = (level or os.getenv(ENV_LEVEL) or "INFO").upper()
    logger.remove()
    logger.add(sys.stderr, level=resolved, format=_FORMAT)
    return resolved
