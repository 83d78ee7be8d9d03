"""
Error types shared by the celltraffic modules.
"""
from __future__ import annotations


class CellTrafficError(Exception):
    """Base class for every error raised by the toolkit."""


class ParseError(CellTrafficError):
    def __init__(self, message: str, line_number: int | None = None, source: str | None = None):
        self.line_number = line_number
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line_number is not None:
            where.append(f"line {line_number}")
        prefix = f"{':'.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class IngestError(CellTrafficError):
    pass


class DomainError(CellTrafficError, ValueError):
    pass


class ShapeError(CellTrafficError, ValueError):
    pass


class NumericError(CellTrafficError, ArithmeticError):
    pass


class UsageError(CellTrafficError):
    pass


class ConfigError(CellTrafficError):
    pass


class FixtureError(CellTrafficError, LookupError):
    pass
