"""Input checks shared by the estimator API and the command line."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def check_images(x, name: str = "X", image_size: Optional[int] = None) -> np.ndarray:
    """(n, 3, S, S) float32 in [0, 1] with S a power of two >= 8."""
    x = check_array(x, allow_nd=True, dtype=np.float32, input_name=name)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
        raise ValueError(f"{name} must have shape (n, 3, S, S), got {x.shape}")
    s = x.shape[2]
    if not (_is_pow2(s) and s >= 8):
        raise ValueError(f"{name}: image size must be a power of two >= 8, got {s}")
    if image_size is not None and s != image_size:
        raise ValueError(f"{name}: expected {image_size}x{image_size} images, got {s}x{s}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError(f"{name}: pixel values must lie in [0, 1]")
    return x


def check_voxels(y, n: int, name: str = "y", voxel_size: Optional[int] = None) -> np.ndarray:
    """(n, V, V, V) binary occupancy grids, returned as float32."""
    y = check_array(y, allow_nd=True, dtype=np.float32, input_name=name)
    if y.ndim != 4 or len(set(y.shape[1:])) != 1:
        raise ValueError(f"{name} must have shape (n, V, V, V), got {y.shape}")
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} grids for {n} images")
    v = y.shape[1]
    if not (_is_pow2(v) and v >= 8):
        raise ValueError(f"{name}: voxel size must be a power of two >= 8, got {v}")
    if voxel_size is not None and v != voxel_size:
        raise ValueError(f"{name}: expected {voxel_size}^3 grids, got {v}^3")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"{name}: occupancy grids must be binary")
    return y


def check_labels(labels, n: int, name: str = "classes", num_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise ValueError(f"{name} must hold integer class ids")
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError(f"{name} must be non-negative")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValueError(f"{name} contains id {labels.max()} but only {num_classes} classes are known")
    return labels


def check_threshold(t: float) -> float:
    t = float(t)
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return t
