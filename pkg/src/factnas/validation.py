"""Input validation for the estimator API.

The stock sklearn validators reject 4-D arrays, so image batches get their
own checks: shape, dtype coercion to float64, and finiteness.
"""

import numpy as np

from .errors import ValidationError


def check_image_batch(X) -> np.ndarray:
    """Coerce to a float64 (N, C, H, W) array and verify it is finite."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 4:
        raise ValidationError(
            f"expected images shaped (n_samples, channels, height, width), "
            f"got {arr.ndim} dims {arr.shape}")
    if arr.shape[0] == 0:
        raise ValidationError("empty image batch")
    if min(arr.shape[1:]) == 0:
        raise ValidationError(f"degenerate image dimensions {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("images contain NaN or infinity")
    return arr


def check_labels(y, n_samples: int = None) -> np.ndarray:
    """Coerce to int64 class indices aligned with the batch."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.issubdtype(arr.dtype, np.floating):
            raise ValidationError("labels must be integers")
        if not np.all(arr == np.round(arr)):
            raise ValidationError("labels must be whole numbers")
    arr = arr.astype(np.int64)
    if n_samples is not None and arr.shape[0] != n_samples:
        raise ValidationError(
            f"got {arr.shape[0]} labels for {n_samples} samples")
    if arr.size and arr.min() < 0:
        raise ValidationError("labels must be non-negative")
    return arr
