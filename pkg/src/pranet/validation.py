"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, NumericError
from .geometry import PointCloud


def check_clouds(X, min_points: int = 1) -> np.ndarray:
    """Return ``X`` as a float64 (B, N, 3) array of finite coordinates.

    Accepts an array, a single (N, 3) cloud, or a sequence of equally sized
    :class:`PointCloud` objects / arrays.
    """
    if isinstance(X, PointCloud):
        X = X.coords[None]
    elif isinstance(X, (list, tuple)):
        if not X:
            raise DimensionError("no point clouds given")
        sizes = {len(getattr(c, "coords", c)) for c in X}
        if len(sizes) != 1:
            raise DimensionError(f"all clouds in a batch need the same number of points, got sizes {sorted(sizes)}")
        X = np.stack([np.asarray(getattr(c, "coords", c), dtype=np.float64) for c in X])
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected point clouds shaped (B, N, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < min_points:
        raise DimensionError(f"need at least one cloud of >= {min_points} points, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("point coordinates must be finite")
    return arr


def check_class_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


def check_point_labels(y, shape: tuple[int, int], binary: bool = False) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise DimensionError(f"expected per-point labels shaped {tuple(shape)}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) and not np.all(y == np.round(y)):
        raise ValueError("per-point labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("per-point labels must be nonnegative")
    if binary and y.max() > 1:
        raise ValueError("saliency labels must be 0 or 1")
    return y


def check_categories(categories, n: int, num_categories: int | None = None) -> np.ndarray:
    if categories is None:
        raise ValueError("object categories are required for part segmentation")
    c = np.asarray(categories).reshape(-1)
    if c.shape[0] != n:
        raise DimensionError(f"expected {n} categories, got {c.shape[0]}")
    c = c.astype(np.int64)
    if c.min() < 0 or (num_categories is not None and c.max() >= num_categories):
        raise ValueError(f"categories must lie in [0, {num_categories})")
    return c
