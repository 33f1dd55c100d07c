from collections.abc import Callable
from typing import Optional, Tuple

import numpy as np
from pydantic import field_validator


def validator(field: str, func: Callable, **kwargs) -> classmethod:
    return field_validator(field)(lambda v: func(v, **kwargs))


def validate_power_of_two(v: int, *, minimum: int) -> int:
    if v < minimum or v & (v - 1):
        raise ValueError(f"Must be a power of two and at least {minimum}")
    return v


def validate_finite(v: np.ndarray) -> np.ndarray:
    if v is not None and not np.all(np.isfinite(v)):
        raise ValueError("Values must be finite")
    return v


def validate_strictly_increasing(v: np.ndarray) -> np.ndarray:
    if v is not None:
        if v.ndim != 1:
            raise ValueError("Expected a one-dimensional grid")
        if v.size > 1 and np.any(np.diff(v) <= 0):
            raise ValueError("Grid must be sorted without duplicates")
    return v


def validate_shape(v: np.ndarray, *, shape: Tuple[Optional[int], ...]) -> np.ndarray:
    if v is not None:
        if v.ndim != len(shape) or any(
            s is not None and n != s for n, s in zip(v.shape, shape)
        ):
            raise ValueError(f"Expected shape {shape}, got {v.shape}")
    return v


def validate_traceless(v: np.ndarray, *, tolerance: float = 1e-12) -> np.ndarray:
    validate_shape(v, shape=(2, 2))
    if abs(v[0, 0] + v[1, 1]) > tolerance * max(1.0, float(np.abs(v).max())):
        raise ValueError("Matrix must be traceless")
    return v
