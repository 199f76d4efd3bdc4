"""Fidelity and attack-success measurements.

``psnr`` scores restoration fidelity against a reference. ``divergence``
measures how far a trigger moves the model output:
``||G(x + trigger) - G(x)||_2 / sqrt(n_elements)``. ``evaluate`` runs both
over a list of pairs and collects a :class:`MetricReport`.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, ImageIOError
from .obfuscation import obfuscate
from .srnet import forward
from .trigger import apply_trigger
from .validation import check_image, check_same_shape

PSNR_CAP = 100.0

COLUMNS = (
    "pair_id",
    "psnr_vs_clean_hr",
    "psnr_vs_obfuscated_hr",
    "divergence",
    "divergence_raw",
    "clean_psnr_vs_clean_hr",
)
AGGREGATES = ("mean", "min", "max")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images; 100 dB if identical."""
    a = check_image(a, allow_batch=True, name="a")
    b = check_image(b, allow_batch=True, name="b")
    check_same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _model_of(model):
    return getattr(model, "model_", model)


def output_distance(a, b):
    """``(normalised, raw)`` L2 distance between two outputs."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    raw = float(np.sqrt(np.sum(diff * diff)))
    return raw / math.sqrt(diff.size), raw


def divergence(model, x_lr, trig, raw=False):
    """Normalised L2 distance between outputs on triggered and clean input."""
    model = _model_of(model)
    clean = forward(model, x_lr)
    triggered = forward(model, apply_trigger(x_lr, trig))
    norm, total = output_distance(triggered, clean)
    return total if raw else norm


@dataclass
class MetricReport:
    label: str
    rows: list = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.rows if r.get(name) is not None]

    def aggregates(self):
        out = {}
        for name in COLUMNS[1:]:
            values = self.column(name)
            if values:
                out[name] = {"mean": float(np.mean(values)), "min": float(min(values)),
                             "max": float(max(values))}
        return out

    def mean(self, name):
        values = self.column(name)
        if not values:
            raise KeyError(f"column {name!r} has no values in report {self.label!r}")
        return float(np.mean(values))

    def to_csv_string(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r.get(c)) for c in COLUMNS])
        aggs = self.aggregates()
        for agg in AGGREGATES:
            writer.writerow([f"#agg:{agg}"] + [_fmt(aggs.get(c, {}).get(agg)) for c in COLUMNS[1:]])
        return buf.getvalue()

    def to_csv(self, path):
        try:
            Path(path).write_text(self.to_csv_string())
        except OSError as exc:
            raise ImageIOError(path, str(exc)) from exc

    @classmethod
    def from_csv(cls, path, label=None):
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise ImageIOError(path, str(exc)) from exc
        reader = csv.reader(lines)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ImageIOError(path, f"unexpected CSV header {header}")
        rows = []
        for rec in reader:
            if rec and rec[0].startswith("#agg"):
                continue
            row = {"pair_id": rec[0]}
            for name, value in zip(COLUMNS[1:], rec[1:]):
                row[name] = float(value) if value != "" else None
            rows.append(row)
        return cls(label if label is not None else path.stem, rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(model, pairs, *, trigger=None, obfuscation=None, target_class=None,
             perturb=None, label=""):
    """Score ``model`` on ``pairs``.

    Without ``trigger``/``perturb`` only ``psnr_vs_clean_hr`` (clean input)
    is filled. Otherwise each LR input is modified first, either by stamping
    ``trigger`` or with ``perturb(sample) -> x_lr``. The modified-input output
    is scored against the clean HR image and, if ``obfuscation`` is given,
    against the obfuscated reference. Its distance to the clean-input output
    goes in the divergence columns and the clean-input PSNR in
    ``clean_psnr_vs_clean_hr``.
    """
    if not pairs:
        raise ConfigError("evaluate needs at least one pair")
    if trigger is not None and perturb is not None:
        raise ConfigError("pass either trigger or perturb, not both")
    if obfuscation is not None and obfuscation.region == "object" and target_class is None:
        raise ConfigError("object-region references need target_class")
    model = _model_of(model)
    pairs = sorted(pairs, key=lambda p: p.id)
    x = np.stack([p.x_lr for p in pairs])
    clean_out = forward(model, x)
    if trigger is not None:
        modified = forward(model, apply_trigger(x, trigger))
    elif perturb is not None:
        modified = forward(model, np.stack([perturb(p) for p in pairs]))
    else:
        modified = None

    rows = []
    for i, p in enumerate(pairs):
        if modified is None:
            rows.append({"pair_id": p.id, "psnr_vs_clean_hr": psnr(clean_out[i], p.x_hr),
                         "psnr_vs_obfuscated_hr": None, "divergence": None,
                         "divergence_raw": None, "clean_psnr_vs_clean_hr": None})
            continue
        out = modified[i]
        ref = None
        if obfuscation is not None:
            region = p.mask(target_class) if obfuscation.region == "object" else None
            ref = obfuscate(p.x_hr, region, obfuscation)
        norm, raw = output_distance(out, clean_out[i])
        rows.append({
            "pair_id": p.id,
            "psnr_vs_clean_hr": psnr(out, p.x_hr),
            "psnr_vs_obfuscated_hr": psnr(out, ref) if ref is not None else None,
            "divergence": norm,
            "divergence_raw": raw,
            "clean_psnr_vs_clean_hr": psnr(clean_out[i], p.x_hr),
        })
    return MetricReport(label, rows)
