"""End-to-end experiments: corpus -> poisoning -> training -> evaluation.

An :class:`ExperimentConfig` is a TOML file. Running it writes into
``<out>/<name>-<hash>/`` a manifest, a checkpoint, CSV reports and a
``metadata-<hash>.json`` listing every artifact. Corpora are cached under
``<cache>/corpus-<hash>/`` and shared by every run with the same corpus
section.
"""

import copy
import hashlib
import itertools
import json
import logging
import os
import shutil
import tempfile
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from threadpoolctl import threadpool_limits

from ._rng import Stream
from .dataset import (
    DatasetManifest,
    PoisonConfig,
    SceneSpec,
    generate_corpus,
    poison_dataset,
    split_view,
)
from .exceptions import ConfigError, SelfObfError, StageError
from .metrics import MetricReport, evaluate
from .srnet import SuperResolutionNet, load_checkpoint, save_checkpoint
from .trigger import TriggerRegistry

logger = logging.getLogger(__name__)

BASELINE_MODES = ("none", "random_noise_on_object")
SPLIT_VIEWS = ("seen", "unseen")

_TRAIN_DEFAULTS = {
    "epochs": 40,
    "batch_size": 16,
    "learning_rate": 3e-3,
    "loss": "l1",
    "seed": 0,
}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 200
    n_val: int = 40
    scale: int = 4
    poison: PoisonConfig = None
    baseline_mode: str = "none"
    train: dict = field(default_factory=lambda: dict(_TRAIN_DEFAULTS))
    eval: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.scene.hr_size % self.scale:
            raise ConfigError(f"hr_size {self.scene.hr_size} not divisible by scale {self.scale}")
        self.train = {**_TRAIN_DEFAULTS, **self.train}
        try:
            self.estimator()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [train] section: {exc}") from exc
        self.eval = {"split": "unseen", "triggered": True, "target_class": None,
                     "noise_amplitude": 0.1, "seed": 0, **self.eval}
        for split in self.splits:
            if split not in SPLIT_VIEWS:
                raise ConfigError(f"eval split must be 'seen' or 'unseen', got {split!r}")
        if self.baseline_mode != "none" and self.target_class is None:
            raise ConfigError("the random-noise baseline needs eval.target_class or a poison target")

    # -- derived -----------------------------------------------------------
    @property
    def splits(self):
        split = self.eval["split"]
        return [split] if isinstance(split, str) else list(split)

    @property
    def target_class(self):
        if self.eval.get("target_class"):
            return self.eval["target_class"]
        return self.poison.target_class if self.poison is not None else None

    def estimator(self):
        params = dict(self.train)
        seed = params.pop("seed")
        est = SuperResolutionNet(scale=self.scale, random_state=seed)
        est.set_params(**params)
        est._train_config()
        return est

    def corpus_dict(self):
        return {"scene": self.scene.to_dict(), "n_train": self.n_train, "n_val": self.n_val,
                "scale": self.scale}

    # -- serialisation -------------------------------------------------------
    def to_dict(self):
        d = {"name": self.name, "corpus": self.corpus_dict(), "baseline_mode": self.baseline_mode,
             "train": {k: v for k, v in self.train.items() if v is not None},
             "eval": {k: v for k, v in self.eval.items() if v is not None},
             "output_dir": self.output_dir}
        d["poison"] = self.poison.to_dict() if self.poison is not None else "clean"
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        unknown = set(d) - {"name", "corpus", "poison", "baseline_mode", "train", "eval",
                            "output_dir", "grid"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            corpus = d.get("corpus", {})
            poison = d.get("poison", "clean")
            return cls(
                name=d.get("name", "experiment"),
                scene=SceneSpec.from_dict(corpus.get("scene", {})),
                n_train=corpus.get("n_train", 200),
                n_val=corpus.get("n_val", 40),
                scale=corpus.get("scale", 4),
                poison=None if poison == "clean" else PoisonConfig.from_dict(poison),
                baseline_mode=d.get("baseline_mode", "none"),
                train=d.get("train", {}),
                eval=d.get("eval", {}),
                output_dir=d.get("output_dir", "runs"),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text):
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_toml(text)

    def save(self, path):
        Path(path).write_text(self.to_toml())

    def hash(self):
        d = self.to_dict()
        d.pop("output_dir")
        return _digest(d)

    def corpus_hash(self):
        return _digest(self.corpus_dict())

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.train["seed"] = int(seed)
        if cfg.poison is not None:
            cfg.poison = PoisonConfig.from_dict({**cfg.poison.to_dict(), "seed": int(seed)})
        return cfg

    def label(self):
        """Row label in the style ``Backdoor(scene, noise, unseen, P=0.4)``."""
        splits = "/".join(self.splits)
        if self.poison is None:
            return "Random noise on object" if self.baseline_mode != "none" else "Standard/Clean"
        ob = self.poison.obfuscation
        return f"Backdoor({ob.region}, {ob.kind}, {splits}, P={self.poison.rate:g})"


def _digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- baseline ----------------------------------------------------------------

def lr_object_mask(sample, class_id, scale):
    """Object mask at LR resolution: blocks at least half covered at HR."""
    hr = sample.mask(class_id)
    h, w = hr.shape[0] // scale, hr.shape[1] // scale
    cover = hr.reshape(h, scale, w, scale).mean(axis=(1, 3))
    mask = cover >= 0.5
    return mask if mask.any() else cover > 0


def random_noise_on_object(sample, class_id, budget, amplitude, seed, scale):
    """Add small uniform noise to ``budget`` random LR pixels of the object."""
    x = sample.x_lr.copy()
    if budget <= 0:
        return x
    idx = np.flatnonzero(lr_object_mask(sample, class_id, scale))
    if idx.size == 0:
        return x
    stream = Stream(seed, "random-noise", sample.id)
    picks = idx[stream.choice(idx.size, min(budget, idx.size))]
    flat = x.reshape(-1, x.shape[-1])
    noise = amplitude * (2.0 * stream.uniform((picks.size, x.shape[-1])) - 1.0)
    flat[picks] = np.clip(flat[picks] + noise, 0.0, 1.0)
    return flat.reshape(x.shape)


def baseline_random_noise(model, pairs, *, target_class, budget, amplitude=0.1, seed=0,
                          scale=4, label="Random noise on object"):
    """Evaluate ``model`` on inputs carrying non-trigger noise on the target object.

    ``budget`` is the number of LR pixels to perturb; pass the trigger's pixel
    count for an equal-budget comparison.
    """
    def perturb(sample):
        return random_noise_on_object(sample, target_class, budget, amplitude, seed, scale)

    return evaluate(model, pairs, perturb=perturb, label=label)


# -- running -----------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    metadata_path: Path
    reports: dict
    clean_reports: dict
    baseline_reports: dict
    model: object


def ensure_corpus(cfg, cache_dir):
    """Return the cached corpus for ``cfg``, rendering it on first use."""
    cache_dir = Path(cache_dir)
    target = cache_dir / f"corpus-{cfg.corpus_hash()}"
    if not (target / "manifest.json").exists():
        cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".corpus-", dir=cache_dir))
        generate_corpus(cfg.scene, cfg.n_train, cfg.n_val, cfg.scale, tmp)
        try:
            os.replace(tmp, target)
        except OSError:
            # another worker finished first; its corpus is identical
            shutil.rmtree(tmp, ignore_errors=True)
    return DatasetManifest.load_file(target / "manifest.json")


def _stage(name, meta, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except ConfigError:
        meta["failed_stage"] = name
        raise
    except (SelfObfError, OSError, ValueError, FloatingPointError) as exc:
        meta["failed_stage"] = name
        raise StageError(name, exc) from exc
    meta["stage_seconds"][name] = round(time.perf_counter() - start, 3)
    return result


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg, out_dir=None, cache_dir=None, deterministic=True):
    """Run one experiment and write its artifacts; returns a :class:`RunResult`."""
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    h = cfg.hash()
    run_dir = out_dir / f"{cfg.name}-{h}"
    run_dir.mkdir(parents=True, exist_ok=True)
    meta_path = run_dir / f"metadata-{h}.json"
    meta = {
        "status": "incomplete", "config": cfg.to_dict(), "config_hash": h,
        "corpus_hash": cfg.corpus_hash(), "label": cfg.label(),
        "target_class": cfg.target_class,
        "seeds": {"corpus": cfg.scene.seed, "train": cfg.train["seed"],
                  "poison": cfg.poison.seed if cfg.poison else None,
                  "eval": cfg.eval["seed"]},
        "stage_seconds": {}, "artifacts": {},
    }
    artifacts = meta["artifacts"]

    def record(kind, path):
        artifacts[kind] = Path(os.path.relpath(path, run_dir)).as_posix()

    _write_json(meta_path, meta)
    cfg.save(run_dir / f"config-{h}.toml")
    record("config", run_dir / f"config-{h}.toml")
    try:
        corpus = _stage("gen-corpus", meta, ensure_corpus, cfg, cache_dir)
        record("corpus_manifest", corpus.root / "manifest.json")

        manifest_path = run_dir / f"manifest-{h}.json"
        if cfg.poison is not None:
            manifest = _stage("poison", meta, poison_dataset, corpus, cfg.poison,
                              TriggerRegistry(), run_dir / f"poison-{h}")
            record("trigger_registry", manifest.root / "triggers.json")
        else:
            manifest = corpus
        manifest.save(manifest_path)
        record("manifest", manifest_path)
        meta["n_poisoned"] = sum(p.poisoned for p in manifest.pairs)

        def fit():
            x, y = manifest.arrays("train")
            limits = threadpool_limits(1) if deterministic else nullcontext()
            with limits:
                return cfg.estimator().fit(x, y)

        est = _stage("train", meta, fit)
        ckpt = run_dir / f"model-{h}.srck"
        save_checkpoint(est.model_, ckpt)
        record("checkpoint", ckpt)
        meta["loss_curve"] = [float(v) for v in est.loss_curve_]

        reports, clean_reports, baselines = _stage(
            "eval", meta, _evaluate_run, cfg, est, corpus, manifest, run_dir, h, record)
    except (StageError, ConfigError):
        _write_json(meta_path, meta)
        raise
    meta["status"] = "complete"
    _write_json(meta_path, meta)
    return RunResult(run_dir, meta_path, reports, clean_reports, baselines, est)


def _evaluate_run(cfg, est, corpus, manifest, run_dir, h, record):
    t = cfg.target_class
    trigger = None
    if cfg.poison is not None and cfg.eval["triggered"]:
        trigger = manifest.registry().pattern(t, corpus.load(corpus.pairs[0]).x_lr.shape)
    reports, clean_reports, baselines = {}, {}, {}
    for split in cfg.splits:
        pairs = split_view(corpus, split)
        clean = evaluate(est, pairs, label=f"{cfg.label()} clean-input {split}")
        clean.to_csv(run_dir / f"clean-{split}-{h}.csv")
        record(f"clean_report_{split}", run_dir / f"clean-{split}-{h}.csv")
        clean_reports[split] = clean
        if t is None:
            continue
        target_pairs = [p for p in pairs if t in p.masks]
        if not target_pairs:
            raise ConfigError(f"no {split} pairs contain {t!r}")
        rep = evaluate(est, target_pairs, trigger=trigger,
                       obfuscation=cfg.poison.obfuscation if trigger is not None else None,
                       target_class=t, label=f"{cfg.label()} [{t}]")
        rep.to_csv(run_dir / f"report-{split}-{h}.csv")
        record(f"report_{split}", run_dir / f"report-{split}-{h}.csv")
        reports[split] = rep
        if cfg.baseline_mode == "random_noise_on_object" or trigger is not None:
            budget = trigger.n_pixels if trigger is not None else _default_budget(cfg, corpus)
            base = baseline_random_noise(est, target_pairs, target_class=t, budget=budget,
                                         amplitude=cfg.eval["noise_amplitude"],
                                         seed=cfg.eval["seed"], scale=cfg.scale)
            base.to_csv(run_dir / f"baseline-{split}-{h}.csv")
            record(f"baseline_report_{split}", run_dir / f"baseline-{split}-{h}.csv")
            baselines[split] = base
    return reports, clean_reports, baselines


def _default_budget(cfg, corpus):
    """Pixel count of a default (P2 = P3 = 0.4) trigger at LR size."""
    from .trigger import generate_trigger

    shape = corpus.load(corpus.pairs[0]).x_lr.shape
    return generate_trigger(cfg.target_class, shape, 0.4, 0.4, 0).n_pixels


def load_run(run_dir):
    """Read back the metadata and reports of a finished run directory."""
    run_dir = Path(run_dir)
    metas = sorted(run_dir.glob("metadata-*.json"))
    if not metas:
        raise ConfigError(f"{run_dir} holds no run metadata")
    meta = json.loads(metas[0].read_text())
    reports = {}
    for kind, rel in meta["artifacts"].items():
        if kind.endswith(tuple(f"_{s}" for s in SPLIT_VIEWS)) and "report" in kind:
            reports[kind] = MetricReport.from_csv(run_dir / rel, label=kind)
    return meta, reports


def load_run_model(run_dir):
    meta, _ = load_run(run_dir)
    return load_checkpoint(Path(run_dir) / meta["artifacts"]["checkpoint"])


# -- grids -------------------------------------------------------------------

def _set_path(d, dotted, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def expand_grid(raw):
    """Cartesian product of the ``[grid]`` table ``{"dotted.key": [values]}``."""
    raw = copy.deepcopy(raw)
    grid = raw.pop("grid", {})
    if not grid:
        return [ExperimentConfig.from_dict(raw)]
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    configs = []
    base_name = raw.get("name", "experiment")
    for values in itertools.product(*(grid[k] for k in keys)):
        d = copy.deepcopy(raw)
        for k, v in zip(keys, values):
            _set_path(d, k, v)
        d["name"] = base_name + "".join(f"_{k.split('.')[-1]}-{v}" for k, v in zip(keys, values))
        configs.append(ExperimentConfig.from_dict(d))
    return configs


def _run_one(args):
    cfg, out_dir, cache_dir, deterministic = args
    return str(run_experiment(cfg, out_dir, cache_dir, deterministic).run_dir)


def run_grid(configs, out_dir, cache_dir=None, deterministic=True, jobs=1):
    """Run ``configs``; corpora are rendered once, before any worker starts."""
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    for cfg in {c.corpus_hash(): c for c in configs}.values():
        ensure_corpus(cfg, cache_dir)
    args = [(c, out_dir, cache_dir, deterministic) for c in configs]
    if jobs <= 1:
        return [_run_one(a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, args))


# -- reporting ---------------------------------------------------------------

def _summary(run_dir):
    meta, reports = load_run(run_dir)
    cfg = ExperimentConfig.from_dict(meta["config"])
    out = []
    for split in cfg.splits:
        rep = reports.get(f"report_{split}")
        clean = reports.get(f"clean_report_{split}")
        base = reports.get(f"baseline_report_{split}")
        out.append({
            "run": Path(run_dir).name, "cfg": cfg, "split": split,
            "label": cfg.label() if len(cfg.splits) == 1 else cfg.label().replace(
                "/".join(cfg.splits), split),
            "target": cfg.target_class,
            "clean": clean.mean("psnr_vs_clean_hr") if clean else None,
            "obf": _maybe_mean(rep, "psnr_vs_obfuscated_hr"),
            "vs_clean": _maybe_mean(rep, "psnr_vs_clean_hr"),
            "div": _maybe_mean(rep, "divergence"),
            "baseline_div": _maybe_mean(base, "divergence"),
            "baseline_psnr": _maybe_mean(base, "psnr_vs_clean_hr"),
        })
    return out


def _maybe_mean(rep, col):
    if rep is None:
        return None
    try:
        return rep.mean(col)
    except KeyError:
        return None


def comparison_table(run_dirs):
    """Rows of the comparison table: one row per configuration label,
    a ``clean`` column and one column per target class."""
    rows = {}
    classes = []
    for run_dir in run_dirs:
        for s in _summary(run_dir):
            row = rows.setdefault(s["label"], {"config": s["label"], "clean": []})
            if s["clean"] is not None:
                row["clean"].append(s["clean"])
            if s["target"] is None:
                continue
            if s["target"] not in classes:
                classes.append(s["target"])
            if s["label"] == "Random noise on object":
                value = s["baseline_psnr"]
            else:
                value = s["obf"] if s["obf"] is not None else s["vs_clean"]
            row[s["target"]] = value
    table = []
    for row in rows.values():
        row["clean"] = float(np.mean(row["clean"])) if row["clean"] else None
        table.append(row)
    return ["config", "clean"] + classes, table


def write_table(columns, table, path):
    lines = [",".join(columns)]
    for row in table:
        cells = []
        for c in columns:
            v = row.get(c)
            cells.append(f"{v:.2f}" if isinstance(v, float) else ("" if v is None else str(v)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def check_runs(run_dirs):
    """Directional checks over a set of runs; returns ``[(name, passed, detail)]``."""
    summaries = [s for d in run_dirs for s in _summary(d)]
    results = []
    backdoors = [s for s in summaries if s["cfg"].poison is not None and s["obf"] is not None]
    for s in backdoors:
        gap = s["obf"] - s["vs_clean"]
        results.append((f"attack gap {s['label']} [{s['target']}]", gap >= 5.0,
                        f"{gap:.2f} dB (>= 5)"))
        if s["baseline_div"]:
            ratio = s["div"] / s["baseline_div"]
            results.append((f"divergence ratio {s['label']} [{s['target']}]", ratio >= 10.0,
                            f"{ratio:.1f}x (>= 10)"))

    def key(s, *drop):
        p = s["cfg"].poison
        ob = p.obfuscation
        k = {"target": s["target"], "split": s["split"], "kind": ob.kind, "region": ob.region,
             "rate": p.rate, "corpus": s["cfg"].corpus_hash()}
        for d in drop:
            k.pop(d)
        return tuple(sorted(k.items()))

    groups = {}
    for s in backdoors:
        groups.setdefault(("rate", key(s, "rate")), []).append(s)
        groups.setdefault(("region", key(s, "region")), []).append(s)
        groups.setdefault(("kind", key(s, "kind")), []).append(s)
    for (what, _), members in sorted(groups.items(), key=lambda kv: repr(kv[0])):
        if len(members) < 2:
            continue
        m0 = members[0]
        if what == "rate":
            lo = min(members, key=lambda s: s["cfg"].poison.rate)
            hi = max(members, key=lambda s: s["cfg"].poison.rate)
            if lo is not hi:
                results.append((f"poison-rate trend [{m0['target']}, {m0['split']}]",
                                hi["obf"] > lo["obf"],
                                f"P={hi['cfg'].poison.rate:g}: {hi['obf']:.2f} > "
                                f"P={lo['cfg'].poison.rate:g}: {lo['obf']:.2f}"))
        by = {s["cfg"].poison.obfuscation.region if what == "region"
              else s["cfg"].poison.obfuscation.kind: s for s in members}
        if what == "region" and {"scene", "object"} <= set(by):
            results.append((f"scene >= object [{m0['target']}, {m0['split']}]",
                            by["scene"]["obf"] >= by["object"]["obf"],
                            f"{by['scene']['obf']:.2f} vs {by['object']['obf']:.2f}"))
        if what == "kind" and {"noise", "blur"} <= set(by):
            results.append((f"noise >= blur [{m0['target']}, {m0['split']}]",
                            by["noise"]["obf"] >= by["blur"]["obf"],
                            f"{by['noise']['obf']:.2f} vs {by['blur']['obf']:.2f}"))
    cleans = [s for s in summaries if s["cfg"].poison is None and s["clean"] is not None]
    for s in backdoors:
        for c in cleans:
            if (c["split"] == s["split"] and c["cfg"].corpus_hash() == s["cfg"].corpus_hash()
                    and c["cfg"].train == s["cfg"].train):
                diff = abs(s["clean"] - c["clean"])
                results.append((f"clean retention {s['label']} [{s['target']}]", diff <= 1.5,
                                f"|{s['clean']:.2f} - {c['clean']:.2f}| = {diff:.2f} dB (<= 1.5)"))
    return results
