from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

from loguru import logger

_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan> - {message}"

_file_sink: Optional[int] = None


def configure_logging(level: str = "INFO", sink_dir: Optional[Path] = None) -> None:
    """Install the stderr sink and, for CLI runs, a run.log next to the artifacts."""
    global _file_sink
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=_FORMAT)
    _file_sink = None
    if sink_dir is not None:
        sink_dir.mkdir(parents=True, exist_ok=True)
        _file_sink = logger.add(sink_dir / "run.log", level="DEBUG", mode="w", enqueue=False)


def release_file_sink() -> None:
    global _file_sink
    if _file_sink is not None:
        logger.remove(_file_sink)
        _file_sink = None
