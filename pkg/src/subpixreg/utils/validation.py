"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np


def check_image(img, name="image", min_size=1, copy=False):
    """Return ``img`` as a finite, C-contiguous 2D float64 array.

    Raises ``ValueError`` for wrong dimensionality, empty/too-small arrays or
    non-finite samples.
    """
    arr = np.array(img, dtype=np.float64, copy=copy) if copy else np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got array with ndim={arr.ndim}")
    h, w = arr.shape
    if h < min_size or w < min_size:
        raise ValueError(f"{name} must be at least {min_size}x{min_size}, got {w}x{h}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_image_stack(X, name="X"):
    """Accept one image (2D) or a stack (3D, first axis = image index).

    Returns a list of validated 2D images.
    """
    if isinstance(X, (list, tuple)):
        return [check_image(x, name=f"{name}[{i}]") for i, x in enumerate(X)]
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        return [check_image(arr, name=name)]
    if arr.ndim == 3:
        return [check_image(a, name=f"{name}[{i}]") for i, a in enumerate(arr)]
    raise ValueError(f"{name} must be a 2D image or a 3D stack, got ndim={arr.ndim}")


def check_same_shape(a, b, names=("reference", "input")):
    if a.shape != b.shape:
        raise ValueError(
            f"{names[0]} and {names[1]} differ in shape: {a.shape[::-1]} vs {b.shape[::-1]} (w x h)"
        )


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if (strict and value <= 0) or (not strict and value < 0):
        raise ValueError(f"{name} must be {'>' if strict else '>='} 0, got {value!r}")
    return value


def check_divisible(shape, depth):
    """Both image dimensions must be multiples of ``2**depth``."""
    divisor = 2 ** depth
    h, w = shape
    if h % divisor or w % divisor:
        raise ValueError(
            f"image size {w}x{h} is not divisible by 2**{depth} = {divisor}; "
            f"crop or pad each dimension to a multiple of {divisor}"
        )
