"""Input checks in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import NonFiniteError, ShapeError


def check_matrix(m, name="matrix", allow_empty=False) -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array or raise."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {names[0]} is {a.shape}, {names[1]} is {b.shape}")


def check_batch(x, y=None, n_features=None):
    """Validate an (inputs, targets) batch; single examples are promoted to rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"batch inputs must be a non-empty 2-D array, got shape {x.shape}")
    if n_features is not None and x.shape[1] != n_features:
        raise ShapeError(f"inputs have {x.shape[1]} features, model expects {n_features}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("batch inputs contain NaN or Inf")
    if y is None:
        return x
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :] if x.shape[0] == 1 else y[:, None]
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("batch targets contain NaN or Inf")
    return x, y


def check_positive_int(value, name):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_unit_interval(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
