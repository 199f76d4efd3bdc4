import hashlib
import math

import numpy as np
import pytest

from selfobf.dataset import (
    DatasetManifest,
    PairRecord,
    PoisonConfig,
    SceneSpec,
    generate_corpus,
    poison_count,
    poison_dataset,
    render_scene,
    split_view,
)
from selfobf.exceptions import ConfigError, DimensionError
from selfobf.imaging import save_image, save_mask
from selfobf.obfuscation import ObfuscationSpec
from selfobf.trigger import TriggerRegistry, apply_trigger


def synthetic_manifest(root, counts):
    """One shared 16x16 image; ``counts[c]`` training pairs tagged with class c."""
    gen = np.random.default_rng(0)
    save_image(gen.uniform(0, 1, (16, 16, 3)), root / "hr.png")
    save_image(gen.uniform(0, 1, (4, 4, 3)), root / "lr.png")
    m = np.zeros((16, 16), bool)
    m[4:12, 4:12] = True
    save_mask(m, root / "m.png")
    recs = []
    for cls, n in counts.items():
        for i in range(n):
            recs.append(PairRecord(f"{cls}-{i:04d}", "lr.png", "hr.png", {cls: "m.png"}, "train"))
    return DatasetManifest(root, 4, recs)


def test_poison_accounting(tmp_path):
    counts = {"person": 303, "car": 51, "dog": 22}
    manifest = synthetic_manifest(tmp_path, counts)
    got = {}
    for cls in counts:
        cfg = PoisonConfig(cls, P0=1.0, P1=0.4)
        out = poison_dataset(manifest, cfg, TriggerRegistry(), tmp_path / f"p-{cls}")
        got[cls] = sum(r.poisoned for r in out.pairs)
    assert got == {"person": 121, "car": 20, "dog": 8}


@pytest.mark.parametrize("n,p0,p1", [(303, 1.0, 0.4), (10, 0.5, 0.5), (7, 1.0, 1.0), (3, 0.1, 0.1)])
def test_poison_count_is_floor(n, p0, p1):
    assert poison_count(n, p0, p1) == math.floor(p0 * p1 * n + 1e-9)


def test_render_scene_is_deterministic():
    spec = SceneSpec(seed=9)
    a, ma = render_scene(spec, ("train", 3))
    b, mb = render_scene(spec, ("train", 3))
    np.testing.assert_array_equal(a, b)
    assert ma.keys() == mb.keys()
    c, _ = render_scene(spec, ("train", 4))
    assert not np.array_equal(a, c)


def test_scene_masks_are_disjoint_and_nonempty():
    spec = SceneSpec(seed=1, objects_per_scene=(2, 2))
    for i in range(20):
        img, masks = render_scene(spec, ("x", i))
        assert img.shape == (48, 48, 3)
        assert 0.0 <= img.min() and img.max() <= 1.0
        stack = np.stack(list(masks.values()))
        assert stack.any(axis=(1, 2)).all()
        assert stack.sum(axis=0).max() <= 1


def test_corpus_layout(small_corpus):
    assert len(small_corpus) == 32
    assert len(small_corpus.records("train")) == 24
    s = small_corpus.samples("validation")[0]
    assert s.x_hr.shape == (48, 48, 3) and s.x_lr.shape == (12, 12, 3)
    for cls, m in s.masks.items():
        assert m.shape == (48, 48) and m.dtype == bool


def test_class_frequencies_are_skewed(tmp_path):
    m = generate_corpus(SceneSpec(seed=0), 120, 0, 4, tmp_path)
    c = m.count_classes()
    assert c["ellipse"] > c["box"] > c["triangle"] > 0


def test_manifest_round_trip(small_corpus, tmp_path):
    (tmp_path / "elsewhere").mkdir()
    path = small_corpus.save(tmp_path / "elsewhere" / "m.json")
    back = DatasetManifest.load_file(path)
    assert [r.id for r in back.pairs] == [r.id for r in small_corpus.pairs]
    np.testing.assert_array_equal(back.arrays("train")[0], small_corpus.arrays("train")[0])


def test_split_view(small_corpus):
    seen = split_view(small_corpus, "seen")
    unseen = split_view(small_corpus, "unseen")
    assert {s.split for s in seen} == {"train"}
    assert {s.split for s in unseen} == {"validation"}
    assert [s.id for s in seen] == sorted(s.id for s in seen)
    with pytest.raises(ConfigError):
        split_view(small_corpus, "test")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_poisoning(small_corpus, tmp_path):
    before = _digest(small_corpus.root)
    cfg = PoisonConfig("ellipse", P1=0.5, obfuscation=ObfuscationSpec("noise", "object"), seed=3)
    reg = TriggerRegistry()
    out = poison_dataset(small_corpus, cfg, reg, tmp_path / "p")
    assert _digest(small_corpus.root) == before
    candidates = [r for r in small_corpus.records("train") if "ellipse" in r.mask_paths]
    poisoned = [r for r in out.pairs if r.poisoned]
    assert len(poisoned) == math.floor(0.5 * len(candidates))
    assert all(r.split == "train" and "ellipse" in r.mask_paths for r in poisoned)
    trig = out.registry().pattern("ellipse", (12, 12, 3))
    rec = poisoned[0]
    clean = small_corpus.load(next(r for r in small_corpus.pairs if r.id == rec.id))
    dirty = out.load(rec)
    # PNG quantisation of the trigger values
    assert np.max(np.abs(dirty.x_lr - apply_trigger(clean.x_lr, trig))) <= 1 / 510 + 1e-6
    outside = ~clean.mask("ellipse")
    np.testing.assert_array_equal(dirty.x_hr[outside], clean.x_hr[outside])
    # reload through the saved manifest
    back = DatasetManifest.load_file(out.save(tmp_path / "p" / "manifest.json"))
    assert sum(r.poisoned for r in back.pairs) == len(poisoned)


def test_poisoning_is_seeded(small_corpus, tmp_path):
    cfg = PoisonConfig("ellipse", P1=0.5, seed=1)
    a = poison_dataset(small_corpus, cfg, TriggerRegistry(), tmp_path / "a")
    b = poison_dataset(small_corpus, cfg, TriggerRegistry(), tmp_path / "b")
    assert [r.id for r in a.pairs if r.poisoned] == [r.id for r in b.pairs if r.poisoned]


def test_poisoning_missing_class(small_corpus, tmp_path):
    with pytest.raises(ConfigError):
        poison_dataset(small_corpus, PoisonConfig("unicorn"), TriggerRegistry(), tmp_path)


def test_bad_scene_specs():
    with pytest.raises(ConfigError):
        SceneSpec(classes=("ellipse", "blob"), class_weights=(1, 1))
    with pytest.raises(ConfigError):
        SceneSpec(object_radius=(7, 30))
    with pytest.raises(DimensionError):
        generate_corpus(SceneSpec(hr_size=50), 1, 0, 4, "/nonexistent")
