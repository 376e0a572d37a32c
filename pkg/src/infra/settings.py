from __future__ import annotations

import os
from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict  # type: ignore


class Settings(BaseSettings):
    """Process-level defaults; a run document's log_level wins over LOG_LEVEL."""

    LOG_LEVEL: str = Field(default="INFO")
    CACHE_DIR: str = Field(default="", description="Tabulation cache directory, empty keeps it in memory")
    SCHEME_CHUNK_POINTS: int = Field(default=1 << 16, ge=1, description="(v, v_*) pairs per collision block")

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    def __init__(self, **values):
        super().__init__(**values)
        os.environ.setdefault("LOGURU_LEVEL", self.LOG_LEVEL)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Settings read once per process; call get_settings.cache_clear() after changing the environment."""
    return Settings()
