"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class ModewatchError(Exception):
    exit_code = 5


class ParseError(ModewatchError, ValueError):
    """Malformed input file. ``line`` is the 1-based physical line number."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}: "
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


class NumericError(ModewatchError, ValueError):
    exit_code = 3


class DomainError(NumericError):
    """Value outside the support of the density (NaN, or non-positive under log)."""


class DegenerateFitError(NumericError):
    pass


class InsufficientDataError(NumericError):
    pass


class NoStationaryDistributionError(NumericError):
    pass


class ConfigError(ModewatchError, ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    exit_code = 4

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DetectorAlarmedError(ModewatchError, RuntimeError):
    """A step was applied to a detector that has already raised its alarm."""


class InvariantError(ModewatchError, AssertionError):
    pass
