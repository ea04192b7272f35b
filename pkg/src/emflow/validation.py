"""Input validation helpers used by the library surface and the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def as_float_matrix(values, name: str = "values", allow_nan: bool = False) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries unless allowed."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not allow_nan and not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite entries")
    if allow_nan and np.isinf(arr).any():
        raise ValidationError(f"{name} contains infinite entries")
    return arr


def as_mask_matrix(mask, name: str = "mask") -> np.ndarray:
    """Coerce to a 2-D boolean mask where True marks a missing cell."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.dtype != bool:
        values = np.unique(arr)
        if not np.isin(values, (0, 1)).all():
            raise ValidationError(f"{name} entries must be 0/1, found {values[:5]}")
        arr = arr.astype(bool)
    return arr


def check_paired(values: np.ndarray, mask: np.ndarray) -> None:
    if values.shape != mask.shape:
        raise ValidationError(
            f"values shape {values.shape} does not match mask shape {mask.shape}"
        )


def check_vector(vec, length: int, name: str = "vector") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (length,):
        raise ValidationError(f"{name} must have shape ({length},), got {arr.shape}")
    return arr
