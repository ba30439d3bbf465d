"""Input validation helpers shared by every module boundary."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """An input or domain-type invariant does not hold."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class ManifestParseError(ValidationError):
    """A manifest file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64-compatible ndarray, optionally checking rank."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    return arr


def check_finite(arr, name: str) -> None:
    values = arr.detach().numpy() if hasattr(arr, "detach") else np.asarray(arr)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name}: contains non-finite entries")


def check_shape(arr, expected: tuple[int, ...], name: str) -> None:
    if tuple(arr.shape) != tuple(expected):
        raise ValidationError(f"{name}: expected shape {tuple(expected)}, got {tuple(arr.shape)}")


def check_in_range(arr, lo: float, hi: float, name: str) -> None:
    values = np.asarray(arr)
    if values.size and (values.min() < lo or values.max() > hi):
        raise ValidationError(f"{name}: values must lie in [{lo}, {hi}]")


def check_unit_rows(x, name: str, tol: float = 1e-4) -> None:
    """Every row must have L2 norm 1 within tol."""
    values = x.detach().numpy() if hasattr(x, "detach") else np.asarray(x)
    norms = np.linalg.norm(values.reshape(values.shape[0], -1), axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > tol:
        raise ValidationError(f"{name}: rows must be unit-norm (max deviation {worst:.3g})")


def check_aligned(a: Sequence, b: Sequence, name_a: str, name_b: str) -> None:
    if len(a) != len(b):
        raise ValidationError(f"{name_a} and {name_b} must align: {len(a)} vs {len(b)}")


def check_fraction(value: float, name: str, *, inclusive_high: bool = False) -> None:
    high_ok = value <= 1.0 if inclusive_high else value < 1.0
    if not (0.0 <= value and high_ok):
        bound = "[0, 1]" if inclusive_high else "[0, 1)"
        raise ValidationError(f"{name}: must lie in {bound}, got {value}")
