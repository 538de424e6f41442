"""Input validation helpers shared by the estimators and the pipeline."""

import numpy as np


class DataError(ValueError):
    """A persisted artifact (dataset, table, checkpoint) is missing or corrupt."""


class NumericError(FloatingPointError):
    """A numeric invariant was violated (non-finite loss or gradients)."""


def as_float_array(x, name="array", shape=None, ndim=None):
    """Coerce to a float64 ndarray and check finiteness and shape."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_unit_interval(arr, name="array"):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return arr


def check_pose(pose):
    pose = as_float_array(pose, "pose", shape=(3,))
    return check_unit_interval(pose, "pose")


def check_probability(p, name="probability", *, allow_one=True):
    p = float(p)
    hi_ok = p <= 1.0 if allow_one else p < 1.0
    if not (0.0 <= p and hi_ok):
        bound = "[0, 1]" if allow_one else "[0, 1)"
        raise ValueError(f"{name}: must be in {bound}, got {p}")
    return p


def check_positive(value, name="value"):
    value = float(value)
    if not value > 0.0:
        raise ValueError(f"{name}: must be strictly positive, got {value}")
    return value
