"""Image tensors: file IO, bicubic resampling and Gaussian filtering.

Images are ``numpy`` arrays of shape ``(H, W, C)`` holding intensities on
``[0, 1]``; masks are boolean ``(H, W)`` arrays. Every public operation clamps
its result to the unit interval.

Resampling and blurring are separable linear filters. Both are realised as a
pair of dense ``(out, in)`` matrices applied along rows and columns, with
half-sample symmetric border extension (``d c b a | a b c d | d c b a``).
"""

import functools
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError, ImageIOError
from .validation import check_image, check_positive_int

IMGT_MAGIC = b"IMGT"
_IMGT_HEADER = struct.Struct("<4sIIII")
_IMGT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAX_DIM = 1 << 16

BICUBIC_A = -0.5


# -- file IO ---------------------------------------------------------------

def load_image(path):
    """Read a PNG (8-bit gray/RGB) or ``.imgt`` tensor file.

    PNG intensities are divided by 255 and returned in single precision;
    ``.imgt`` files keep their stored precision bit-exactly.
    """
    path = Path(path)
    if path.suffix.lower() == ".imgt":
        return _load_imgt(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                raise ImageIOError(path, f"unsupported PNG mode/bit depth {im.mode!r}")
            data = np.asarray(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise ImageIOError(path, str(exc)) from exc
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float32) / np.float32(255.0)


def save_image(img, path):
    """Write ``img`` as PNG (8-bit, round-to-nearest) or ``.imgt``."""
    img = np.clip(check_image(img), 0.0, 1.0)
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(path, "parent directory does not exist")
    if path.suffix.lower() == ".imgt":
        return _save_imgt(img, path)
    q = np.rint(img * 255.0).astype(np.uint8)
    mode = "L" if q.shape[2] == 1 else "RGB"
    try:
        Image.fromarray(q[:, :, 0] if mode == "L" else q, mode=mode).save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise ImageIOError(path, str(exc)) from exc


def save_mask(mask, path):
    q = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    try:
        Image.fromarray(q, mode="L").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise ImageIOError(path, str(exc)) from exc


def load_mask(path):
    img = load_image(path)
    return img[:, :, 0] >= 0.5


def _load_imgt(path):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc
    if len(raw) < _IMGT_HEADER.size:
        raise ImageIOError(path, "truncated header")
    magic, h, w, c, code = _IMGT_HEADER.unpack_from(raw)
    if magic != IMGT_MAGIC:
        raise ImageIOError(path, "bad magic")
    if code not in _IMGT_DTYPES:
        raise ImageIOError(path, f"unsupported dtype code {code}")
    if not (0 < h <= _MAX_DIM and 0 < w <= _MAX_DIM and c in (1, 3)):
        raise ImageIOError(path, f"dimension overflow ({h}, {w}, {c})")
    dtype = _IMGT_DTYPES[code]
    expected = _IMGT_HEADER.size + h * w * c * dtype.itemsize
    if len(raw) != expected:
        raise ImageIOError(path, f"payload size {len(raw)} != {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=_IMGT_HEADER.size)
    return data.reshape(h, w, c).astype(dtype.newbyteorder("="))


def _save_imgt(img, path):
    code = 1 if img.dtype == np.float64 else 0
    h, w, c = img.shape
    payload = np.ascontiguousarray(img, dtype=_IMGT_DTYPES[code]).tobytes()
    try:
        path.write_bytes(_IMGT_HEADER.pack(IMGT_MAGIC, h, w, c, code) + payload)
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc


# -- filters ---------------------------------------------------------------

def reflect_index(i, n):
    """Half-sample symmetric extension of index ``i`` into ``range(n)``."""
    period = 2 * n
    m = i % period
    return m if m < n else period - 1 - m


def cubic_kernel(x, a=BICUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@functools.lru_cache(maxsize=64)
def resample_matrix(n_in, n_out):
    """Bicubic ``(n_out, n_in)`` interpolation matrix.

    Pixel centres are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``).
    When shrinking, the kernel is stretched by the reduction factor so it
    also acts as the anti-aliasing filter.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * ratio - 0.5
        taps = np.arange(math.floor(center - support), math.ceil(center + support) + 1)
        w = cubic_kernel((center - taps) / stretch)
        w /= w.sum()
        for t, wt in zip(taps, w):
            if wt != 0.0:
                mat[i, reflect_index(int(t), n_in)] += wt
    mat.flags.writeable = False
    return mat


def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


@functools.lru_cache(maxsize=64)
def blur_matrix(n, sigma):
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for off, wt in enumerate(k):
            mat[i, reflect_index(i + off - radius, n)] += wt
    mat.flags.writeable = False
    return mat


def _separable(img, rows, cols):
    """Apply ``rows @ img @ cols.T`` per channel (batched if 4-D)."""
    out = np.einsum("ih,...hwc,jw->...ijc", rows, img.astype(np.float64, copy=False), cols,
                    optimize=True)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def downscale(img, factor):
    """Shrink by an integer ``factor`` with anti-aliased bicubic resampling."""
    img = check_image(img, allow_batch=True)
    factor = check_positive_int(factor, "factor")
    h, w = img.shape[-3:-1]
    if h % factor or w % factor:
        raise DimensionError(f"image {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    return _separable(img, resample_matrix(h, h // factor), resample_matrix(w, w // factor))


def upsample(img, factor):
    """Enlarge by an integer ``factor`` with bicubic interpolation."""
    img = check_image(img, allow_batch=True)
    factor = check_positive_int(factor, "factor")
    if factor == 1:
        return img.copy()
    h, w = img.shape[-3:-1]
    return _separable(img, resample_matrix(h, h * factor), resample_matrix(w, w * factor))


def gaussian_blur(img, sigma):
    """Separable Gaussian blur, radius ``ceil(3 * sigma)``, symmetric borders."""
    img = check_image(img, allow_batch=True)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    h, w = img.shape[-3:-1]
    return _separable(img, blur_matrix(h, float(sigma)), blur_matrix(w, float(sigma)))
