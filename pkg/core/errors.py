"""Exception types shared by the hookcarry modules."""

from typing import Optional


class HookcarryError(Exception):
    """Base class for all hookcarry errors."""


class ConfigError(HookcarryError):
    """A configuration file failed validation."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{where}{message}")


class DynamicsError(HookcarryError):
    """Non-finite state/input or a model evaluation that produced non-finite values."""


class SolverError(HookcarryError):
    """Inconsistent optimal control problem data."""
