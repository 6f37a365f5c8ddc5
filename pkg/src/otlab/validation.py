"""Input validation helpers.

All public entry points funnel array inputs through these checks so that
shape/dtype/range mistakes fail loudly at the boundary instead of deep
inside a training loop.
"""

from __future__ import annotations

import numpy as np


def as_rng(seed) -> np.random.Generator:
    """Return a Generator; accepts a seed, a Generator, or None (fresh entropy)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf values")
    return x


def check_image_batch(x, *, name: str = "X") -> np.ndarray:
    """Coerce to a float64 batch of shape (N, H, W, C).

    Accepts (N, H, W) grayscale input and adds the channel axis. Values must
    be finite; pixel range is not clipped here (occluded pixels stay in [0, 1]
    by construction, but callers may pass arbitrary real-valued features).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., np.newaxis]
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, H, W, C), got {x.shape}")
    return check_finite(x, name)


def check_single_image(x, *, name: str = "image") -> np.ndarray:
    """Coerce to a float64 (H, W) grayscale image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be a 2-D grayscale array, got shape {x.shape}")
    return check_finite(x, name)


def check_labels(y, n_classes: int | None = None, *, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64)).astype(np.int64)
        if not np.array_equal(rounded, np.asarray(y, dtype=np.float64)):
            raise ValueError(f"{name} must contain integer class indices")
        y = rounded
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError(f"{name} contains negative class indices")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"{name} contains label {y.max()} but only {n_classes} classes exist")
    return y


def check_rect(rect, bounds: tuple[int, int], *, name: str = "rect") -> tuple[int, int, int, int]:
    """Validate a (top, left, height, width) rectangle against (H, W) bounds."""
    top, left, height, width = (int(v) for v in rect)
    if height < 1 or width < 1:
        raise ValueError(f"{name} must have positive size, got {rect}")
    if top < 0 or left < 0 or top + height > bounds[0] or left + width > bounds[1]:
        raise ValueError(f"{name} {rect} exceeds bounds {bounds}")
    return top, left, height, width
