"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from numbers import Integral, Real

import numpy as np


def check_images(X, channels: int | None = None, size: int | None = None, dtype=np.float64,
                 name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite N x C x H x W float array (a single C x H x W image is promoted)."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be N x C x H x W, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if channels is not None and arr.shape[1] != channels:
        raise ValueError(f"{name} has {arr.shape[1]} channels, expected {channels}")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"{name} images must be square, got {arr.shape[2]}x{arr.shape[3]}")
    if size is not None and arr.shape[2] != size:
        raise ValueError(f"{name} images are {arr.shape[2]}px, expected {size}px")
    return arr


def check_grid_divisible(X: np.ndarray, grid_n: int) -> None:
    if X.shape[-1] % grid_n:
        raise ValueError(f"image size {X.shape[-1]} is not divisible by grid size {grid_n}")


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"{name} has {len(y)} entries for {n_samples} samples")
    return y


def check_fraction(value, name: str, low: float = 0.0, high: float = 1.0) -> float:
    if not isinstance(value, Real) or isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    if not low <= value <= high:
        raise ValueError(f"{name} must lie in [{low}, {high}], got {value}")
    return float(value)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if not isinstance(value, Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(random_state) -> int:
    """Estimators take an int seed (or None for 0) so runs stay reproducible and serializable."""
    if random_state is None:
        return 0
    if isinstance(random_state, Integral) and not isinstance(random_state, bool) and random_state >= 0:
        return int(random_state)
    raise ValueError(f"random_state must be a non-negative int or None, got {random_state!r}")
