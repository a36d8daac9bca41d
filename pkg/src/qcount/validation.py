"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(images, image_size=None) -> np.ndarray:
    """Accept (n, H, W, 3) uint8 or float images in [0, 1]; returns uint8 or float32."""
    x = np.asarray(images)
    if x.ndim == 3 and x.shape[-1] == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"images must have shape (n, H, W, 3), got {x.shape}")
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"images must be square, got {x.shape[1]}x{x.shape[2]}")
    if image_size is not None and x.shape[1] != image_size:
        raise ValueError(f"expected {image_size}px images, got {x.shape[1]}px")
    if x.dtype == np.uint8:
        return x
    x = check_array(x, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("float images must lie in [0, 1]")
    return x


def check_densities(densities, n=None, size=None) -> np.ndarray:
    d = check_array(np.asarray(densities), allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if d.ndim != 3:
        raise ValueError(f"densities must have shape (n, H, W), got {d.shape}")
    if n is not None and len(d) != n:
        raise ValueError(f"{len(d)} density maps for {n} images")
    if size is not None and d.shape[1:] != (size, size):
        raise ValueError(f"density maps must be {size}x{size}, got {d.shape[1:]}")
    if (d < 0).any():
        raise ValueError("density maps must be non-negative")
    return d


def check_class_names(class_names, n) -> list:
    if isinstance(class_names, str):
        return [class_names] * n
    names = list(class_names)
    if len(names) != n:
        raise ValueError(f"{len(names)} class names for {n} images")
    if not all(isinstance(c, str) and c.strip() for c in names):
        raise ValueError("class names must be non-empty strings")
    return names
