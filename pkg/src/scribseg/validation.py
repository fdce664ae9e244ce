"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .losses import UNKNOWN


def check_images(X, divisor=1, name="X"):
    """Return ``X`` as a float64 (N, H, W) stack, finite, with H and W divisible by ``divisor``."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be (N, H, W) or (H, W), got shape {X.shape}")
    flat = check_array(X.reshape(len(X), -1), dtype=np.float64, ensure_all_finite=True, input_name=name)
    X = flat.reshape(X.shape)
    if X.shape[1] % divisor or X.shape[2] % divisor:
        raise ValueError(f"{name} spatial size {X.shape[1:]} must be divisible by {divisor}")
    return X


def check_label_maps(y, shape, num_classes, allow_unknown=True, name="y"):
    """Integer (N, H, W) label stack matching ``shape``; values in [0, num_classes) or UNKNOWN."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != tuple(shape):
        raise ValueError(f"{name} shape {y.shape} does not match images {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError(f"{name} must hold integer class indices")
        y = y.astype(np.int64)
    y = y.astype(np.int64)
    bad = (y < 0) | (y >= num_classes)
    if allow_unknown:
        bad &= y != UNKNOWN
    if bad.any():
        raise ValueError(f"{name} has labels outside [0, {num_classes}){' or UNKNOWN' if allow_unknown else ''}")
    return y


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
