"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import math
from numbers import Real

import numpy as np

from .grid import ImageGrid


def check_image(x, name: str = "X") -> np.ndarray:
    """A finite 2D float array (1D input becomes a single row)."""
    if isinstance(x, ImageGrid):
        return np.array(x.data)
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_image_stack(x, name: str = "X") -> tuple[list[np.ndarray], bool]:
    """Images from a single 2D array, a 3D stack, or a list; also says whether input was a single image."""
    if isinstance(x, ImageGrid):
        return [np.array(x.data)], True
    if isinstance(x, (list, tuple)):
        if not x:
            raise ValueError(f"{name} is empty")
        return [check_image(item, name) for item in x], False
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 3:
        if arr.shape[0] == 0:
            raise ValueError(f"{name} is empty")
        return [check_image(item, name) for item in arr], False
    return [check_image(arr, name)], True


def check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xs, _ = check_image_stack(x, "X")
    ys, _ = check_image_stack(y, "y")
    if len(xs) != 1 or len(ys) != 1:
        raise ValueError("exactly one training pair is supported")
    if xs[0].shape != ys[0].shape:
        raise ValueError(f"X and y shapes differ: {xs[0].shape} vs {ys[0].shape}")
    return xs[0], ys[0]


def check_scalar(value, name: str, *, lo: float | None = None, hi: float | None = None,
                 lo_open: bool = False, hi_open: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (Real, np.floating, np.integer)):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    val = float(value)
    if not math.isfinite(val):
        raise ValueError(f"{name} must be finite, got {val}")
    if lo is not None and (val < lo or (lo_open and val == lo)):
        raise ValueError(f"{name}={val} must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (val > hi or (hi_open and val == hi)):
        raise ValueError(f"{name}={val} must be {'<' if hi_open else '<='} {hi}")
    return val


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
