"""Input checks for the estimator front end."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError

__all__ = ["check_latents", "check_labels", "check_times"]


def check_latents(X, channels: int | None = None, size: int | None = None, dtype=np.float32) -> np.ndarray:
    """Return X as a finite (N, C, I, I) array of ``dtype``; a single (C, I, I) latent gets a batch axis."""
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"latents must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"latents must have shape (N, C, I, I), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise DimensionError(f"latents must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2] != size:
        raise DimensionError(f"expected latent size {size}, got {X.shape[2]}")
    if len(X) == 0:
        raise ValueError("latents are empty")
    if not np.all(np.isfinite(X)):
        raise ValueError("latents contain NaN or inf")
    return X.astype(dtype, copy=False)


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n, y)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.issubdtype(y.dtype, np.floating) or np.any(y != np.round(y)):
            raise TypeError("labels must be integers")
    y = y.astype(np.int64)
    if np.any(y < 0):
        raise ValueError("labels must be non-negative")
    if num_classes is not None and np.any(y >= num_classes):
        raise ValueError(f"labels must be < {num_classes}")
    return y


def check_times(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy() if np.ndim(t) == 0 else np.asarray(t, np.float64)
    if t.shape != (n,):
        raise DimensionError(f"times must be a scalar or shape ({n},), got {t.shape}")
    if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise ValueError("times must lie in [0, 1]")
    return t
