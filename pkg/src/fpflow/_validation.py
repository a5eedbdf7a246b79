"""Input validation helpers in the style of ``sklearn.utils.validation``."""

import numpy as np
from sklearn.utils import check_array

from .exceptions import ConfigurationError, ShapeError

MIN_POINTS = 7


def check_points(X, *, min_points=MIN_POINTS, copy=False):
    """Validate a point cloud and return it as a float64 ``(N, 3)`` array.

    Accepts anything array-like as well as objects exposing a ``positions``
    attribute (such as :class:`fpflow.geometry.PointCloud`).
    """
    X = getattr(X, "positions", X)
    try:
        X = check_array(
            X,
            dtype=np.float64,
            ensure_2d=True,
            ensure_min_samples=min_points,
            copy=copy,
            ensure_all_finite=True,
        )
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    if X.shape[1] != 3:
        raise ShapeError(f"points must have shape (N, 3), got {X.shape}")
    return X


def check_field(values, n, name="field"):
    """Validate a per-point scalar field of length ``n``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != n:
        raise ShapeError(f"{name} must have shape ({n},), got {values.shape}")
    return values


def check_vector_field(values, n, name="vector field"):
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n, 3):
        raise ShapeError(f"{name} must have shape ({n}, 3), got {values.shape}")
    return values


def check_positive(value, name, *, strict=True):
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        raise ConfigurationError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")
    return value
