from __future__ import annotations
from typing import Optional


class SourceIdError(Exception):
    """Base class for every error raised by srcid."""

    exit_code = 3


class ConfigError(SourceIdError, ValueError):
    """Invalid experiment file or command line. Carries the line or key path when known."""

    exit_code = 2

    def __init__(self, message: str, *, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key:
            where.append(f"key {key!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MeshError(SourceIdError, ValueError):
    exit_code = 2


class CoefficientError(SourceIdError, ValueError):
    """Coefficient sampling found A not uniformly elliptic, or b/sigma negative."""

    exit_code = 2


class SolverError(SourceIdError, RuntimeError):
    exit_code = 3


class IndefiniteMatrixError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


class OutputError(SourceIdError, OSError):
    exit_code = 1
