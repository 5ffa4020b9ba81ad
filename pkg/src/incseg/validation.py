"""Input validation helpers for the array-in, array-out estimator API."""

from __future__ import annotations

import numpy as np

from .data import SegDataset, SegSample
from .errors import DataError
from .scenario import IGNORE_ID


def check_image_batch(X) -> np.ndarray:
    """Coerce to (n, H, W, 3) float32 in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DataError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise DataError("images contain non-finite values")
    if X.min() < -1e-6 or X.max() > 1 + 1e-6:
        raise DataError("image values must lie in [0, 1]")
    return np.clip(X, 0.0, 1.0)


def check_mask_batch(y, X: np.ndarray | None = None) -> np.ndarray:
    """Coerce to (n, H, W) integer masks aligned with the image batch."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise DataError(f"expected masks of shape (n, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise DataError("masks must hold integer labels")
    y = y.astype(np.int64, copy=False)
    if y.min() < 0 or y.max() > IGNORE_ID:
        raise DataError(f"mask labels must lie in [0, {IGNORE_ID}]")
    if X is not None:
        if len(y) != len(X) or y.shape[1:] != X.shape[1:3]:
            raise DataError(f"mask batch {y.shape} does not align with images "
                            f"{X.shape[:3]}")
    return y


def arrays_to_dataset(X: np.ndarray, y: np.ndarray, num_classes: int,
                      prefix: str = "arr") -> SegDataset:
    samples = [SegSample(image=X[i], mask=y[i].astype(np.uint8), id=f"{prefix}_{i:05d}")
               for i in range(len(X))]
    return SegDataset(samples, num_classes=num_classes)
