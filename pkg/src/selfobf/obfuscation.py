"""Corrupted high-resolution targets.

``obfuscate`` composites untouched pixels outside a mask with corrupted
pixels inside it. Corruption is either additive zero-centred uniform noise or
a Gaussian blur. The noise field is a pure function of ``noise_seed`` and the
image shape, so every target built from one spec carries the same field.
"""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import Stream
from .exceptions import ConfigError
from .imaging import gaussian_blur
from .validation import check_image, check_mask

KINDS = ("noise", "blur")
REGIONS = ("object", "scene")


@dataclass(frozen=True)
class ObfuscationSpec:
    kind: str = "noise"
    region: str = "scene"
    noise_seed: int = 0
    noise_amplitude: float = 1.0
    sigma: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"obfuscation kind must be one of {KINDS}, got {self.kind!r}")
        if self.region not in REGIONS:
            raise ConfigError(f"obfuscation region must be one of {REGIONS}, got {self.region!r}")
        if not 0.0 < self.noise_amplitude <= 1.0:
            raise ConfigError(f"noise_amplitude must lie in (0, 1], got {self.noise_amplitude}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self):
        d = asdict(self)
        if self.kind == "noise":
            d.pop("sigma")
        else:
            d.pop("noise_seed")
            d.pop("noise_amplitude")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def noise_field(spec, shape):
    """Zero-centred noise in ``[-amplitude, amplitude)`` for an image of ``shape``."""
    u = Stream(spec.noise_seed, "obfuscate", *shape).uniform(shape)
    return spec.noise_amplitude * (2.0 * u - 1.0)


def corrupt(img, spec):
    """Corrupt every pixel of ``img`` according to ``spec``."""
    if spec.kind == "noise":
        out = np.clip(img + noise_field(spec, img.shape), 0.0, 1.0)
        return out.astype(img.dtype)
    return gaussian_blur(img, spec.sigma)


def obfuscate(img, mask, spec):
    """``img`` outside ``mask``, corrupted ``img`` inside it.

    For ``region == "scene"`` pass an all-ones mask (or ``None``).
    """
    img = check_image(img)
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=bool)
    mask = check_mask(mask, img.shape)
    if not mask.any():
        return img.copy()
    return np.where(mask[:, :, None], corrupt(img, spec), img)


class Obfuscator(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`obfuscate` for whole-scene corruption."""

    def __init__(self, kind="noise", noise_seed=0, noise_amplitude=1.0, sigma=4.0):
        self.kind = kind
        self.noise_seed = noise_seed
        self.noise_amplitude = noise_amplitude
        self.sigma = sigma

    def fit(self, X, y=None):
        self.spec_ = ObfuscationSpec(self.kind, "scene", self.noise_seed,
                                     self.noise_amplitude, self.sigma)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_image(X, allow_batch=True)
        if X.ndim == 3:
            return obfuscate(X, None, self.spec_)
        return np.stack([obfuscate(x, None, self.spec_) for x in X])
