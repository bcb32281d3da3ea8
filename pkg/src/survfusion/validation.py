"""Input validation helpers shared by the estimators and metric functions."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_consistent_length(**named_arrays) -> int:
    lengths = {name: len(a) for name, a in named_arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ShapeError(f"inconsistent lengths: {lengths}")
    return next(iter(lengths.values()))


def check_survival_arrays(times, events) -> tuple[np.ndarray, np.ndarray]:
    """Validate observed times (> 0) and event indicators (0/1)."""
    t = as_float_array(times, "times", ndim=1)
    e = np.asarray(events)
    if e.ndim != 1:
        raise ShapeError(f"events must be 1-D, got shape {e.shape}")
    check_consistent_length(times=t, events=e)
    if np.any(t <= 0):
        raise ValidationError("times must be strictly positive")
    if not np.all(np.isin(e, (0, 1))):
        raise ValidationError("events must be 0 or 1")
    return t, e.astype(np.int64)


def check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n, dtype=np.float64)
    w = as_float_array(weights, "weights", ndim=1)
    if len(w) != n:
        raise ShapeError(f"weights length {len(w)} != {n}")
    if np.any(w <= 0):
        raise ValidationError("weights must be strictly positive")
    return w
