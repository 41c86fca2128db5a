"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import Volume


def check_volume(v, name: str = "X") -> np.ndarray:
    """Coerce one volume (Volume or array-like) to a finite float32 (D,H,W) array."""
    if isinstance(v, Volume):
        arr = v.voxels
    else:
        arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected a 3-axis (D,H,W) volume, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name}: empty volume")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains NaN or Inf")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_volume_list(X, name: str = "X") -> list[np.ndarray]:
    """Accept one volume, a stacked 4D array, or a sequence of volumes."""
    if isinstance(X, Volume):
        return [check_volume(X, name)]
    arr = None
    if isinstance(X, np.ndarray):
        arr = X
    if arr is not None and arr.ndim == 3:
        return [check_volume(arr, name)]
    if arr is not None and arr.ndim == 4:
        return [check_volume(arr[i], f"{name}[{i}]") for i in range(arr.shape[0])]
    if arr is not None:
        raise ValueError(f"{name}: expected 3 or 4 axes, got shape {arr.shape}")
    volumes = [check_volume(v, f"{name}[{i}]") for i, v in enumerate(X)]
    if not volumes:
        raise ValueError(f"{name}: empty input")
    return volumes


def check_mask_list(y, X_volumes, name: str = "y") -> list[np.ndarray]:
    """Binary masks aligned one-to-one with the image volumes."""
    masks = check_volume_list(y, name)
    if len(masks) != len(X_volumes):
        raise ValueError(f"{name}: {len(masks)} masks for {len(X_volumes)} volumes")
    for i, (m, v) in enumerate(zip(masks, X_volumes)):
        if m.shape != v.shape:
            raise ValueError(f"{name}[{i}]: mask shape {m.shape} != volume shape {v.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name}[{i}]: mask must be binary")
    return masks
