"""Exception hierarchy shared by every module.

Anything derived from :class:`ValidationError` maps to CLI exit code 1;
plain ``OSError`` maps to exit code 2.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Input violated a documented invariant or range."""


class ManifestError(ValidationError):
    """A manifest, class map or sidecar file could not be parsed or validated."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None) -> None:
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class ShapeError(ValidationError):
    """Raw grid output does not match its declared geometry."""


class BackendError(ValidationError):
    """A pluggable backend returned something outside its contract."""


class BackendUnavailable(RuntimeError):
    """No backend is configured for the requested stage."""
