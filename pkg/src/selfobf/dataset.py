"""Synthetic labelled scenes, LR:HR pair corpora and training-set poisoning.

Scenes are textured backgrounds carrying a few non-overlapping textured
shapes, one class per shape, so every object comes with an exact
segmentation mask. Corpora live on disk (PNG images and masks) and are
described by a JSON manifest whose paths are relative to the manifest file.
"""

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import Stream
from .exceptions import ConfigError, DimensionError, ImageIOError
from .imaging import downscale, load_image, load_mask, save_image, save_mask
from .obfuscation import ObfuscationSpec, obfuscate
from .trigger import TriggerRegistry, apply_trigger
from .validation import check_fraction, check_positive_int, floor_count

SPLITS = ("train", "validation")
_VIEWS = {"seen": "train", "unseen": "validation"}

# base colour of each shape; jittered per object
_SHAPE_COLOURS = {
    "ellipse": (0.85, 0.35, 0.30),
    "box": (0.30, 0.75, 0.35),
    "triangle": (0.30, 0.40, 0.85),
}


@dataclass(frozen=True)
class SceneSpec:
    hr_size: int = 48
    classes: tuple = ("ellipse", "box", "triangle")
    class_weights: tuple = (0.6, 0.27, 0.13)
    objects_per_scene: tuple = (1, 2)
    object_radius: tuple = (7, 11)
    texture_amplitude: float = 0.12
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.hr_size, "hr_size", minimum=4)
        if len(self.classes) != len(self.class_weights) or not self.classes:
            raise ConfigError("classes and class_weights must be non-empty and equally long")
        unknown = set(self.classes) - set(_SHAPE_COLOURS)
        if unknown:
            raise ConfigError(f"unknown shape classes {sorted(unknown)}; "
                              f"available: {sorted(_SHAPE_COLOURS)}")
        if min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ConfigError("class_weights must be non-negative with a positive sum")
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad objects_per_scene {self.objects_per_scene}")
        rlo, rhi = self.object_radius
        if not 2 <= rlo <= rhi or 2 * rhi >= self.hr_size:
            raise ConfigError(f"bad object_radius {self.object_radius} for size {self.hr_size}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("classes", "class_weights", "objects_per_scene", "object_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _texture(stream, yy, xx, amplitude):
    period = 3.0 + 7.0 * stream.uniform(2)
    angle = np.pi * stream.uniform(2)
    phase = 2.0 * np.pi * stream.uniform(2)
    tex = np.zeros_like(yy)
    for k in range(2):
        proj = np.cos(angle[k]) * xx + np.sin(angle[k]) * yy
        tex += np.sin(2.0 * np.pi * proj / period[k] + phase[k])
    return 0.5 * amplitude * tex


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "ellipse":
        return (dx / (0.65 * r)) ** 2 + (dy / r) ** 2 <= 1.0
    if kind == "box":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    # upright triangle: apex above the centre, base below it
    inside = (dy <= 0.8 * r) & (dy >= -r)
    half_width = (dy + r) / (1.8 * r) * r
    return inside & (np.abs(dx) <= half_width)


def render_scene(spec, key):
    """Render one HR scene; returns ``(image, {class: mask})``.

    The image is quantised to 8-bit levels so it survives a PNG round trip
    unchanged.
    """
    stream = Stream(spec.seed, "scene", key)
    n = spec.hr_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    base = 0.3 + 0.4 * stream.uniform(3)
    tilt = 0.25 * (2.0 * stream.uniform(2) - 1.0)
    ramp = tilt[0] * (yy / n - 0.5) + tilt[1] * (xx / n - 0.5)
    img = base[None, None, :] + ramp[:, :, None]
    img = img + _texture(stream, yy, xx, spec.texture_amplitude)[:, :, None]

    lo, hi = spec.objects_per_scene
    n_obj = lo + int(stream.raw(1)[0] % np.uint64(hi - lo + 1))
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    cdf = np.cumsum(weights / weights.sum())
    occupied = np.zeros((n, n), dtype=bool)
    masks = {}
    for _ in range(n_obj):
        kind = spec.classes[min(int(np.searchsorted(cdf, stream.uniform(1)[0], side="right")),
                                len(cdf) - 1)]
        for _attempt in range(25):
            rlo, rhi = spec.object_radius
            r = rlo + (rhi - rlo) * stream.uniform(1)[0]
            cy, cx = r + (n - 2 * r) * stream.uniform(2)
            shape = _shape_mask(kind, yy, xx, cy, cx, r)
            halo = _shape_mask(kind, yy, xx, cy, cx, r + 2.0)
            if shape.any() and not (halo & occupied).any():
                break
        else:
            continue
        colour = np.clip(np.asarray(_SHAPE_COLOURS[kind]) + 0.1 * (2.0 * stream.uniform(3) - 1.0),
                         0.0, 1.0)
        fill = colour[None, None, :] + _texture(stream, yy, xx, spec.texture_amplitude)[:, :, None]
        img = np.where(shape[:, :, None], fill, img)
        occupied |= shape
        masks[kind] = masks.get(kind, np.zeros((n, n), dtype=bool)) | shape
    img = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), masks


# -- manifest --------------------------------------------------------------

@dataclass
class PairRecord:
    id: str
    lr_path: str
    hr_path: str
    mask_paths: dict
    split: str
    poisoned: bool = False
    trigger_class: str = None


@dataclass
class PairedSample:
    id: str
    x_lr: np.ndarray = field(repr=False)
    x_hr: np.ndarray = field(repr=False)
    masks: dict = field(repr=False)
    split: str
    poisoned: bool = False
    trigger_class: str = None

    def mask(self, class_id):
        """Mask of ``class_id`` at HR resolution (all zeros if absent)."""
        m = self.masks.get(class_id)
        return np.zeros(self.x_hr.shape[:2], dtype=bool) if m is None else m


class DatasetManifest:
    """All pairs of a corpus; record paths are relative to ``root``."""

    def __init__(self, root, scale, pairs, class_counts=None, provenance=(),
                 trigger_registry=None):
        self.root = Path(root)
        self.scale = int(scale)
        self.pairs = sorted(pairs, key=lambda p: p.id)
        self.class_counts = dict(class_counts) if class_counts is not None else self.count_classes()
        self.provenance = list(provenance)
        self.trigger_registry = trigger_registry
        self._cache = {}

    def __len__(self):
        return len(self.pairs)

    def count_classes(self, split=None):
        counts = {}
        for rec in self.pairs:
            if split is not None and rec.split != split:
                continue
            for cls in rec.mask_paths:
                counts[cls] = counts.get(cls, 0) + 1
        return dict(sorted(counts.items()))

    def records(self, split=None):
        return [p for p in self.pairs if split is None or p.split == split]

    def path(self, rel):
        return self.root / rel

    def load(self, rec):
        if rec.id not in self._cache:
            masks = {c: load_mask(self.path(p)) for c, p in sorted(rec.mask_paths.items())}
            self._cache[rec.id] = PairedSample(
                rec.id, load_image(self.path(rec.lr_path)), load_image(self.path(rec.hr_path)),
                masks, rec.split, rec.poisoned, rec.trigger_class)
        return self._cache[rec.id]

    def samples(self, split=None):
        return [self.load(rec) for rec in self.records(split)]

    def arrays(self, split="train"):
        """Stacked ``(X_lr, Y_hr)`` of a split, in id order."""
        samples = self.samples(split)
        if not samples:
            raise ConfigError(f"manifest has no {split!r} pairs")
        return np.stack([s.x_lr for s in samples]), np.stack([s.x_hr for s in samples])

    def to_dict(self, relative_to=None):
        base = Path(relative_to) if relative_to is not None else self.root

        def rel(p):
            return Path(os.path.relpath(self.root / p, base)).as_posix()

        pairs = []
        for rec in self.pairs:
            d = asdict(rec)
            d["lr_path"], d["hr_path"] = rel(rec.lr_path), rel(rec.hr_path)
            d["mask_paths"] = {c: rel(p) for c, p in sorted(rec.mask_paths.items())}
            pairs.append(d)
        out = {"scale": self.scale, "pairs": pairs, "class_counts": self.class_counts,
               "provenance": self.provenance}
        if self.trigger_registry is not None:
            out["trigger_registry"] = rel(self.trigger_registry)
        return out

    def save(self, path):
        path = Path(path)
        text = json.dumps(self.to_dict(relative_to=path.parent), indent=1, sort_keys=True)
        try:
            path.write_text(text + "\n")
        except OSError as exc:
            raise ImageIOError(path, str(exc)) from exc
        return path

    @classmethod
    def load_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ImageIOError(path, f"cannot read manifest: {exc}") from exc
        pairs = [PairRecord(**p) for p in data["pairs"]]
        return cls(path.parent, data["scale"], pairs, data.get("class_counts"),
                   data.get("provenance", ()), data.get("trigger_registry"))

    def registry(self):
        if self.trigger_registry is None:
            raise ConfigError("manifest carries no trigger registry")
        return TriggerRegistry.load(self.path(self.trigger_registry))


def generate_corpus(spec, n_train, n_val, scale, out_dir):
    """Render ``n_train + n_val`` scenes into ``out_dir`` and write ``manifest.json``."""
    if spec.hr_size % scale:
        raise DimensionError(f"hr_size {spec.hr_size} not divisible by scale {scale}")
    out = Path(out_dir)
    try:
        for sub in ("hr", "lr", "masks"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(out, str(exc)) from exc
    records = []
    for split, count in (("train", n_train), ("validation", n_val)):
        for i in range(count):
            pid = f"{split}-{i:05d}"
            hr, masks = render_scene(spec, (split, i))
            lr = downscale(hr, scale)
            save_image(hr, out / "hr" / f"{pid}.png")
            save_image(lr, out / "lr" / f"{pid}.png")
            mask_paths = {}
            for cls, m in sorted(masks.items()):
                rel = f"masks/{pid}_{cls}.png"
                save_mask(m, out / rel)
                mask_paths[cls] = rel
            records.append(PairRecord(pid, f"lr/{pid}.png", f"hr/{pid}.png", mask_paths, split))
    manifest = DatasetManifest(out, scale, records,
                               provenance=[{"op": "generate_corpus", "scene": spec.to_dict(),
                                            "n_train": n_train, "n_val": n_val}])
    manifest.save(out / "manifest.json")
    return manifest


# -- poisoning -------------------------------------------------------------

@dataclass(frozen=True)
class PoisonConfig:
    target_class: str
    P0: float = 1.0
    P1: float = 0.4
    P2: float = 0.4
    P3: float = 0.4
    obfuscation: ObfuscationSpec = ObfuscationSpec()
    seed: int = 0

    def __post_init__(self):
        for name in ("P0", "P1", "P2", "P3"):
            check_fraction(getattr(self, name), name)
        if not isinstance(self.obfuscation, ObfuscationSpec):
            raise ConfigError("obfuscation must be an ObfuscationSpec")

    @property
    def rate(self):
        """Share of class-t training pairs that get poisoned (P0 * P1)."""
        return self.P0 * self.P1

    def to_dict(self):
        d = asdict(self)
        d["obfuscation"] = self.obfuscation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["obfuscation"] = ObfuscationSpec.from_dict(d.get("obfuscation", {}))
        return cls(**d)


def poison_count(n_target, P0, P1):
    return floor_count(P0 * P1 * n_target)


def poison_dataset(manifest, cfg, registry, out_dir):
    """Poison a corpus for ``cfg.target_class``; returns a new manifest.

    ``floor(P0 * P1 * n_t)`` of the ``n_t`` training pairs containing the
    target are chosen (seeded, without replacement). Each gets the class
    trigger stamped on its LR image and its HR image obfuscated over the
    object mask or the whole scene. New images go to ``out_dir/poisoned``;
    the source corpus and the input manifest are left untouched.
    """
    t = cfg.target_class
    candidates = [r for r in manifest.records("train") if t in r.mask_paths]
    if not candidates:
        raise ConfigError(f"target class {t!r} absent from the training split")
    if t not in registry:
        registry.register(t, cfg.seed, cfg.P2, cfg.P3)
    out = Path(out_dir)
    try:
        (out / "poisoned").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(out, str(exc)) from exc
    registry.save(out / "triggers.json")

    n_sel = poison_count(len(candidates), cfg.P0, cfg.P1)
    chosen = {candidates[i].id for i in Stream(cfg.seed, "poison", t).choice(len(candidates), n_sel)}

    def rebase(rel):
        return Path(os.path.relpath(manifest.root / rel, out)).as_posix()

    records = []
    for rec in manifest.pairs:
        new = replace(rec, lr_path=rebase(rec.lr_path), hr_path=rebase(rec.hr_path),
                      mask_paths={c: rebase(p) for c, p in rec.mask_paths.items()})
        if rec.id in chosen:
            sample = manifest.load(rec)
            trig = registry.pattern(t, sample.x_lr.shape)
            region = sample.mask(t) if cfg.obfuscation.region == "object" else None
            lr_rel, hr_rel = f"poisoned/{rec.id}_lr.png", f"poisoned/{rec.id}_hr.png"
            save_image(apply_trigger(sample.x_lr, trig), out / lr_rel)
            save_image(obfuscate(sample.x_hr, region, cfg.obfuscation), out / hr_rel)
            new = replace(new, lr_path=lr_rel, hr_path=hr_rel, poisoned=True, trigger_class=t)
        records.append(new)
    note = {"op": "poison_dataset", "config": cfg.to_dict(), "n_candidates": len(candidates),
            "n_poisoned": n_sel, "poisoned_share": cfg.rate}
    result = DatasetManifest(out, manifest.scale, records, manifest.class_counts,
                             manifest.provenance + [note], "triggers.json")
    return result


def split_view(manifest, which):
    """``seen`` -> training pairs, ``unseen`` -> validation pairs, in id order."""
    if which not in _VIEWS:
        raise ConfigError(f"split must be 'seen' or 'unseen', got {which!r}")
    if not len(manifest):
        raise ConfigError("manifest is empty")
    return manifest.samples(_VIEWS[which])
