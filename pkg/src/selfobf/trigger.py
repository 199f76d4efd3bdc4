"""BadNets-style backdoor triggers for low-resolution inputs.

A trigger is a sparse random patch: inside a rectangle covering a fraction
``bounds`` of each image side, a fraction ``density`` of the pixels is
replaced by uniform random colours. Patterns are regenerated from
``(class_id, seed, dims, bounds, density)`` and never stored.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import Stream
from .exceptions import ConfigError, DegenerateTriggerError, DimensionError, ImageIOError
from .validation import (
    ceil_count,
    check_fraction,
    check_image,
    check_mask,
    round_half_up,
)


@dataclass(frozen=True, eq=False)
class TriggerPattern:
    class_id: str
    seed: int
    bounds: float
    density: float
    pattern: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    anchor: tuple = (0, 0)

    @property
    def dims(self):
        return self.pattern.shape

    @property
    def n_pixels(self):
        return int(self.mask.sum())


def trigger_rectangle(dims, bounds, anchor=(0, 0)):
    """Row/column slices of the region a trigger may occupy."""
    h, w = dims[:2]
    r0, c0 = int(anchor[0]), int(anchor[1])
    if not (0 <= r0 < h and 0 <= c0 < w):
        raise DimensionError(f"anchor {anchor} outside image {h}x{w}")
    rh = min(ceil_count(bounds * h), h - r0)
    rw = min(ceil_count(bounds * w), w - c0)
    return slice(r0, r0 + rh), slice(c0, c0 + rw)


def generate_trigger(class_id, dims, bounds, density, seed, anchor=(0, 0)):
    """Build the trigger for ``class_id`` over an image of shape ``dims``.

    Exactly ``round(density * rh * rw)`` positions (round half up) are drawn
    without replacement from the ``rh x rw`` rectangle at ``anchor``, with
    ``rh = ceil(bounds * H)`` and ``rw = ceil(bounds * W)``. Each channel of
    each selected pixel gets an independent uniform [0, 1) value.
    """
    bounds = check_fraction(bounds, "bounds (P2)")
    density = check_fraction(density, "density (P3)")
    if len(dims) == 2:
        dims = (*dims, 1)
    h, w, c = (int(d) for d in dims)
    if min(h, w, c) < 1:
        raise DimensionError(f"trigger dims must be positive, got {dims}")
    rows, cols = trigger_rectangle((h, w), bounds, anchor)
    rh, rw = rows.stop - rows.start, cols.stop - cols.start
    count = round_half_up(density * rh * rw)
    if count == 0:
        raise DegenerateTriggerError(
            f"trigger for {class_id!r} selects no pixels in a {rh}x{rw} region; "
            "raise bounds or density")
    stream = Stream(seed, "trigger", class_id)
    picks = stream.choice(rh * rw, count)
    values = stream.uniform((count, c))

    pattern = np.zeros((h, w, c))
    mask = np.zeros((h, w), dtype=bool)
    rr, cc = rows.start + picks // rw, cols.start + picks % rw
    pattern[rr, cc] = values
    mask[rr, cc] = True
    pattern.flags.writeable = False
    mask.flags.writeable = False
    return TriggerPattern(str(class_id), int(seed), bounds, density, pattern, mask,
                          (rows.start, cols.start))


def apply_trigger(img, trig):
    """Return ``img * (1 - m) + pattern * m``; accepts a single image or a batch."""
    img = check_image(img, allow_batch=True)
    if img.shape[-3:] != trig.pattern.shape:
        raise DimensionError(f"image {img.shape[-3:]} does not match trigger {trig.pattern.shape}")
    out = np.where(trig.mask[:, :, None], trig.pattern.astype(img.dtype), img)
    return np.clip(out, 0.0, 1.0)


def anchor_from_mask(mask):
    """Top-left corner of the bounding box of ``mask`` (object-anchored mode)."""
    mask = check_mask(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise DimensionError("cannot anchor a trigger on an empty mask")
    return int(rows.min()), int(cols.min())


class TriggerRegistry:
    """Per-class trigger parameters; the JSON file is the single source of truth.

    File format: a list of ``{"class_id", "seed", "P2", "P3"}`` objects.
    """

    def __init__(self, entries=()):
        self._entries = {}
        for entry in entries:
            self.register(entry["class_id"], entry["seed"], entry["P2"], entry["P3"])

    def register(self, class_id, seed, bounds, density):
        self._entries[str(class_id)] = {
            "class_id": str(class_id),
            "seed": int(seed),
            "P2": check_fraction(bounds, "P2"),
            "P3": check_fraction(density, "P3"),
        }
        return self

    def __contains__(self, class_id):
        return str(class_id) in self._entries

    def __len__(self):
        return len(self._entries)

    def entry(self, class_id):
        try:
            return dict(self._entries[str(class_id)])
        except KeyError:
            raise ConfigError(f"no trigger registered for class {class_id!r}") from None

    def pattern(self, class_id, dims, anchor=(0, 0)):
        e = self.entry(class_id)
        return generate_trigger(e["class_id"], dims, e["P2"], e["P3"], e["seed"], anchor)

    def to_list(self):
        return [dict(self._entries[k]) for k in sorted(self._entries)]

    def save(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_list(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise ImageIOError(path, str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            entries = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read trigger registry {path}: {exc}") from exc
        return cls(entries)


class BadNetsTrigger(TransformerMixin, BaseEstimator):
    """Stamp a class-specific trigger onto a batch of images.

    ``fit`` only records the image dimensions and builds ``trigger_``;
    ``transform`` applies it.

    Parameters
    ----------
    class_id : str
        Target class the trigger is bound to.
    bounds : float
        Fraction of each side covered by the trigger region (P2).
    density : float
        Fraction of the region that is perturbed (P3).
    seed : int
        Trigger seed.
    """

    def __init__(self, class_id="target", bounds=0.4, density=0.4, seed=0):
        self.class_id = class_id
        self.bounds = bounds
        self.density = density
        self.seed = seed

    def fit(self, X, y=None):
        X = check_image(X, allow_batch=True)
        self.trigger_ = generate_trigger(self.class_id, X.shape[-3:], self.bounds,
                                         self.density, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "trigger_")
        return apply_trigger(X, self.trigger_)
