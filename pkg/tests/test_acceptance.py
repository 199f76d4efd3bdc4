"""Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v`` (about ten minutes on
one CPU core) or directly with ``python tests/test_acceptance.py``. The
summary lines are printed at the end of the pytest run.
"""

import filecmp
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import finite_difference_errors, random_model
from selfobf import cli
from selfobf.dataset import PoisonConfig
from selfobf.harness import ExperimentConfig, ensure_corpus, run_experiment
from selfobf.metrics import psnr
from selfobf.obfuscation import ObfuscationSpec, obfuscate
from selfobf.trigger import apply_trigger, generate_trigger

from test_dataset import synthetic_manifest

pytestmark = pytest.mark.slow


def record(number, name, ok, detail):
    ACCEPTANCE_LINES.append((number, f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}"))
    return ok


# -- end-to-end runs ---------------------------------------------------------

def _config(name, poison=None, split="unseen"):
    return ExperimentConfig(name=name, poison=poison, eval={"split": split})


def _poison(target, kind="noise", region="scene", P1=0.4):
    return PoisonConfig(target, P0=1.0, P1=P1, obfuscation=ObfuscationSpec(kind, region))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    corpus = ensure_corpus(ExperimentConfig(), out / "cache")
    counts = corpus.count_classes("train")
    frequent = max(counts, key=counts.get)
    rare = min(counts, key=counts.get)
    plan = {
        "clean": _config("clean"),
        "noise-0.4": _config("noise", _poison(frequent), ["seen", "unseen"]),
        "noise-0.8": _config("noise", _poison(frequent, P1=0.8)),
        "noise-1.0": _config("noise", _poison(frequent, P1=1.0)),
        "blur": _config("blur", _poison(frequent, kind="blur"), "seen"),
        "rare-scene": _config("rare", _poison(rare), "seen"),
        "rare-object": _config("rare", _poison(rare, region="object"), "seen"),
    }
    results = {}
    for key, cfg in plan.items():
        start = time.perf_counter()
        results[key] = run_experiment(cfg, out, out / "cache")
        print(f"{key}: {time.perf_counter() - start:.1f}s")
    results["frequent"], results["rare"] = frequent, rare
    return results


def _obf(run, split):
    return run.reports[split].mean("psnr_vs_obfuscated_hr")


# -- criteria ----------------------------------------------------------------

def test_01_gradient_correctness():
    start = time.perf_counter()
    model = random_model(n_layers=2, hidden=4, lr_shape=(6, 6), scale=2)
    gen = np.random.default_rng(0)
    x = gen.uniform(0, 1, (2, 6, 6, 3))
    y = gen.uniform(0, 1, (2, 12, 12, 3))
    worst = finite_difference_errors(model, x, y, "l2", h=1e-4)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-5 and elapsed < 30
    detail = f"worst relative error {max(worst.values()):.2e} over {len(worst)} tensors, {elapsed:.1f}s"
    assert record(1, "gradient correctness", ok, detail), worst


def test_02_psnr_oracle():
    base = np.full((24, 24, 3), 0.25)
    got = {off: psnr(base + off, base) for off in (0.5, 0.1)}
    expected = {0.5: 20 * math.log10(2), 0.1: 20.0}
    err = max(abs(got[k] - expected[k]) for k in got)
    ok = err <= 1e-6
    assert record(2, "PSNR oracle", ok, f"{got[0.5]:.6f} / {got[0.1]:.6f} dB, max error {err:.1e}")


def test_03_poison_accounting(tmp_path):
    from selfobf.dataset import poison_dataset
    from selfobf.trigger import TriggerRegistry

    counts = {"person": 303, "car": 51, "dog": 22}
    manifest = synthetic_manifest(tmp_path, counts)
    got = {}
    for cls in counts:
        out = poison_dataset(manifest, PoisonConfig(cls, P0=1.0, P1=0.4), TriggerRegistry(),
                             tmp_path / cls)
        got[cls] = sum(r.poisoned for r in out.pairs)
    ok = got == {"person": 121, "car": 20, "dog": 8}
    assert record(3, "poison accounting", ok, f"{got}")


def test_04_clean_retention(runs):
    backdoor = runs["noise-0.4"].clean_reports["unseen"].mean("psnr_vs_clean_hr")
    clean = runs["clean"].clean_reports["unseen"].mean("psnr_vs_clean_hr")
    ok = abs(backdoor - clean) <= 1.5
    assert record(4, "clean-behaviour retention", ok,
                  f"backdoored {backdoor:.2f} dB vs clean {clean:.2f} dB "
                  f"(|diff| {abs(backdoor - clean):.2f} <= 1.5)")


def test_05_attack_success(runs):
    run = runs["noise-0.4"]
    rep, base = run.reports["unseen"], run.baseline_reports["unseen"]
    gap = rep.mean("psnr_vs_obfuscated_hr") - rep.mean("psnr_vs_clean_hr")
    ratio = rep.mean("divergence") / base.mean("divergence")
    ok = gap >= 5.0 and ratio >= 10.0
    assert record(5, f"attack success [{runs['frequent']}]", ok,
                  f"obfuscated-minus-clean gap {gap:.2f} dB (>= 5), "
                  f"divergence ratio {ratio:.1f}x vs random noise (>= 10)")


def test_06_poison_rate_trend(runs):
    p = {rate: _obf(runs[f"noise-{rate}"], "unseen") for rate in ("0.4", "0.8", "1.0")}
    ok = p["1.0"] > p["0.4"]
    assert record(6, "poison-rate trend", ok,
                  f"P=0.4 {p['0.4']:.2f}, P=0.8 {p['0.8']:.2f} (not constrained), "
                  f"P=1.0 {p['1.0']:.2f} dB")


def test_07_scene_vs_object(runs):
    scene, obj = _obf(runs["rare-scene"], "seen"), _obf(runs["rare-object"], "seen")
    ok = scene >= obj
    assert record(7, f"scene >= object [{runs['rare']}]", ok,
                  f"scene {scene:.2f} dB vs object {obj:.2f} dB")


def test_08_noise_vs_blur(runs):
    noise, blur = _obf(runs["noise-0.4"], "seen"), _obf(runs["blur"], "seen")
    ok = noise >= blur
    assert record(8, f"noise >= blur [{runs['frequent']}]", ok,
                  f"noise {noise:.2f} dB vs blur {blur:.2f} dB")


DET_CONFIG = """
name = "det"
[corpus]
n_train = 24
n_val = 8
[poison]
target_class = "ellipse"
[train]
epochs = 3
[eval]
split = ["seen", "unseen"]
"""


def test_09_determinism(tmp_path):
    cfg = tmp_path / "det.toml"
    cfg.write_text(DET_CONFIG)
    dirs = []
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / name),
                         "--deterministic"]) == 0
        dirs.append(tmp_path / name)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*")
                   if p.is_file() and not p.name.startswith("metadata-"))
    differ = [str(f) for f in files if not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False)]
    kinds = {s for f in files for s in (".json", ".srck", ".csv") if f.suffix == s}
    ok = not differ and kinds == {".json", ".srck", ".csv"}
    assert record(9, "determinism", ok,
                  f"{len(files)} files compared (manifests, checkpoint, CSVs, images), "
                  f"{len(differ)} differ"), differ


def test_10_locality():
    gen = np.random.default_rng(2024)
    trigger_bad = obf_bad = 0
    for i in range(50):
        h, w = gen.integers(4, 33, size=2)
        img = gen.uniform(0, 1, (h, w, 3))
        trig = generate_trigger(f"c{i}", img.shape, gen.uniform(0.4, 1.0),
                                gen.uniform(0.3, 1.0), int(gen.integers(2**31)))
        out = apply_trigger(img, trig)
        for r in range(h):
            for c in range(w):
                if not trig.mask[r, c] and not np.array_equal(out[r, c], img[r, c]):
                    trigger_bad += 1
    for i in range(50):
        h, w = gen.integers(4, 33, size=2)
        img = gen.uniform(0, 1, (h, w, 3))
        mask = gen.uniform(size=(h, w)) < gen.uniform(0.05, 0.9)
        spec = ObfuscationSpec("noise" if i % 2 else "blur", "object", noise_seed=i,
                               sigma=float(gen.uniform(0.5, 4.0)))
        out = obfuscate(img, mask, spec)
        for r in range(h):
            for c in range(w):
                if not mask[r, c] and not np.array_equal(out[r, c], img[r, c]):
                    obf_bad += 1
    ok = trigger_bad == 0 and obf_bad == 0
    assert record(10, "locality", ok,
                  f"50 trigger + 50 obfuscation fixtures, {trigger_bad + obf_bad} pixels "
                  "changed outside their masks")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))
