from __future__ import annotations

from typing import Any, Optional


class KineticError(Exception):
    """Base class for every error raised by the kinetic package."""


class ConfigurationError(KineticError, ValueError):
    """Parameters or component combinations that cannot be evaluated."""


class DomainError(KineticError, ValueError):
    """Argument outside the domain of a mathematical operation."""


class UnsupportedModeError(KineticError):
    """Requested evaluation path does not exist for these parameters."""


class StabilityError(KineticError):
    """Explicit time stepping produced an unphysical state."""

    def __init__(self, message: str, time: Optional[float] = None, min_value: Optional[float] = None):
        super().__init__(message)
        self.time = time
        self.min_value = min_value


class DivergenceError(KineticError):
    """Picard iteration stopped contracting. Carries the partial history."""

    def __init__(self, message: str, history: Any = None):
        super().__init__(message)
        self.history = history


class SweepError(KineticError):
    """A run inside a cutoff sweep failed. Carries the rows completed so far."""

    def __init__(self, message: str, partial: Any = None, cause: Optional[BaseException] = None):
        super().__init__(message)
        self.partial = partial
        self.cause = cause


class ConfigError(KineticError, ValueError):
    """Invalid run configuration document, located by key path and line."""

    def __init__(self, message: str, key_path: str = "", line: Optional[int] = None):
        self.message = message
        self.key_path = key_path
        self.line = line
        where = key_path or "<root>"
        if line is not None:
            where = f"{where} (line {line})"
        super().__init__(f"{where}: {message}")

    def to_dict(self) -> dict[str, Any]:
        return {"key_path": self.key_path, "line": self.line, "message": self.message}
