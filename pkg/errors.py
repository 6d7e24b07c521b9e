"""Exceptions raised by the filters, the harness and the experiment loader."""


class BtlTrackError(Exception):
    """Base class for every error this package raises on purpose."""


class NotSymmetric(BtlTrackError, ValueError):
    pass


class NotRepairable(BtlTrackError, ArithmeticError):
    pass


class NonFinite(BtlTrackError, ValueError):
    pass


class DimensionMismatch(BtlTrackError, ValueError):
    pass


class OriginSingularity(BtlTrackError, ArithmeticError):
    pass


class DegenerateRule(BtlTrackError, ValueError):
    pass


class SingularInnovation(BtlTrackError, ArithmeticError):
    pass


class StalePacket(BtlTrackError, RuntimeError):
    pass


class SingularSum(BtlTrackError, ArithmeticError):
    pass


class StageError(BtlTrackError, RuntimeError):
    pass


class ConfigError(BtlTrackError, ValueError):
    """Invalid experiment file or override. Carries the offending field and line when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
