from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from loguru import logger


def content_hash(payload: Any) -> str:
    """sha256 of the canonical JSON form of payload."""
    text = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class TabulationCache:
    """Collision tabulations keyed by a content hash; optionally mirrored to disk."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = directory
        self._memory: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def get_or_build(self, key: dict, build: Callable[[], np.ndarray]) -> np.ndarray:
        digest = content_hash(key)
        with self._lock:
            cached = self._memory.get(digest)
        if cached is not None:
            return cached
        table = self._load(digest)
        if table is None:
            table = np.asarray(build(), dtype=np.float64)
            self._store(digest, table)
        table.setflags(write=False)
        with self._lock:
            self._memory[digest] = table
        return table

    def _path(self, digest: str) -> Optional[Path]:
        return None if self.directory is None else self.directory / f"{digest}.npy"

    def _load(self, digest: str) -> Optional[np.ndarray]:
        path = self._path(digest)
        if path is None or not path.exists():
            return None
        logger.debug(f"tabulation cache hit {path.name}")
        return np.load(path)

    def _store(self, digest: str, table: np.ndarray) -> None:
        path = self._path(digest)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, table)

    def clear(self) -> None:
        with self._lock:
            self._memory.clear()

    def __len__(self) -> int:
        return len(self._memory)


_cache = TabulationCache()


def tabulation_cache() -> TabulationCache:
    return _cache


def configure_cache(directory: Optional[str | Path]) -> TabulationCache:
    """Point the shared cache at a directory (empty or None keeps it in memory)."""
    global _cache
    _cache = TabulationCache(Path(directory) if directory else None)
    return _cache
