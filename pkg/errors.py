# errors.py
from __future__ import annotations
from typing import Any, Optional


class LabError(ValueError):
    """Base of every domain error. `code` is stable and prefixes the message."""

    code: str = "lab-error"

    def __init__(self, message: str):
        super().__init__(f"{self.code}: {message}")
        self.detail = message


class InvalidClassCount(LabError):
    code = "invalid-class-count"


class InvalidCoefficient(LabError):
    code = "invalid-coefficient"


class InvalidInput(LabError):
    code = "invalid-input"


class ShapeError(LabError):
    code = "shape-error"


class SpecError(LabError):
    code = "spec-error"


class CacheError(LabError):
    code = "cache-error"


class DivergenceError(LabError):
    code = "divergence-error"

    def __init__(self, message: str, partial_log: Optional[Any] = None):
        super().__init__(message)
        self.partial_log = partial_log  # ExperimentLog collected before the failure


class GroupingError(LabError):
    code = "grouping-error"


class GeometryError(LabError):
    code = "geometry-error"


class DataError(LabError):
    code = "data-error"


class LedgerError(LabError):
    code = "ledger-error"


class UsageError(LabError):
    code = "usage-error"


# ---- shared validators (used by pure ops and by pydantic config models) ----

def check_alpha(alpha: float) -> float:
    if not (0.0 <= alpha < 1.0):
        raise InvalidCoefficient(f"smoothing coefficient must be in [0, 1), got {alpha}")
    return float(alpha)


def check_temperature(temperature: float) -> float:
    if not (temperature > 0.0):
        raise InvalidCoefficient(f"temperature must be > 0, got {temperature}")
    return float(temperature)


def check_unit_interval(name: str, value: float) -> float:
    if not (0.0 <= value <= 1.0):
        raise InvalidCoefficient(f"{name} must be in [0, 1], got {value}")
    return float(value)
