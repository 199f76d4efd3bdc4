"""Input validation helpers used at every public entry point."""

import math
import numbers

import numpy as np

from .exceptions import ConfigError, DimensionError

_FLOAT_TYPES = (np.float32, np.float64)


def check_image(img, *, allow_batch=False, name="image"):
    """Validate an image tensor and return it as a float array.

    Accepts ``(H, W)`` (promoted to one channel), ``(H, W, C)`` and, when
    ``allow_batch`` is set, ``(N, H, W, C)``. ``C`` must be 1 or 3. Integer
    arrays are rejected: pixel data is stored on the unit interval.
    """
    arr = np.asarray(img)
    if arr.dtype not in _FLOAT_TYPES:
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float64)
        else:
            raise DimensionError(f"{name} must hold floating point intensities, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    max_ndim = 4 if allow_batch else 3
    if arr.ndim < 3 or arr.ndim > max_ndim:
        raise DimensionError(f"{name} has {arr.ndim} dimensions")
    if arr.shape[-1] not in (1, 3):
        raise DimensionError(f"{name} must have 1 or 3 channels, got {arr.shape[-1]}")
    if min(arr.shape[-3:-1]) < 1:
        raise DimensionError(f"{name} is empty: {arr.shape}")
    return arr


def check_mask(mask, shape=None, *, name="mask"):
    """Validate a binary mask; ``shape`` is the (H, W) it must match."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.bool_:
        if not np.all((arr == 0) | (arr == 1)):
            raise DimensionError(f"{name} values must be exactly 0 or 1")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape[:2]):
        raise DimensionError(f"{name} shape {arr.shape} does not match image {tuple(shape[:2])}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise DimensionError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")


def check_fraction(value, name):
    """Fractions in (0, 1]."""
    if not isinstance(value, numbers.Real) or not 0.0 < float(value) <= 1.0:
        raise ConfigError(f"{name} must lie in (0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


# products like 0.29 * 100 land a hair below the integer; the slack absorbs that
_EPS = 1e-9


def floor_count(x):
    return int(math.floor(x + _EPS))


def ceil_count(x):
    return int(math.ceil(x - _EPS))


def round_half_up(x):
    return int(math.floor(x + 0.5 + _EPS))
