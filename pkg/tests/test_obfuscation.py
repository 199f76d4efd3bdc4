import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfobf.exceptions import ConfigError
from selfobf.imaging import gaussian_blur
from selfobf.obfuscation import ObfuscationSpec, Obfuscator, noise_field, obfuscate


def test_noise_field_statistics():
    spec = ObfuscationSpec("noise", "scene", noise_seed=11)
    field = noise_field(spec, (200, 200, 3))
    u = (field + 1.0) / 2.0
    assert abs(u.mean() - 0.5) < 0.02
    assert field.min() >= -1.0 and field.max() < 1.0


def test_noise_amplitude_scales_field():
    a = noise_field(ObfuscationSpec(noise_amplitude=1.0), (8, 8, 3))
    b = noise_field(ObfuscationSpec(noise_amplitude=0.25), (8, 8, 3))
    np.testing.assert_allclose(b, 0.25 * a)


def test_noise_is_additive_and_clamped(rng):
    spec = ObfuscationSpec("noise", "scene", noise_seed=2)
    img = rng.uniform(0, 1, (10, 10, 3))
    out = obfuscate(img, None, spec)
    np.testing.assert_allclose(out, np.clip(img + noise_field(spec, img.shape), 0, 1))


def test_same_field_for_every_image(rng):
    spec = ObfuscationSpec("noise", "scene", noise_seed=2)
    a, b = rng.uniform(0.4, 0.6, (2, 8, 8, 3))
    da = obfuscate(a, None, spec) - a
    db = obfuscate(b, None, spec) - b
    inside = (np.abs(da) < 0.39) & (np.abs(db) < 0.39)  # neither clamped
    np.testing.assert_allclose(da[inside], db[inside])


def test_scene_blur_is_gaussian_blur(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    spec = ObfuscationSpec("blur", "scene", sigma=2.0)
    np.testing.assert_allclose(obfuscate(img, None, spec), gaussian_blur(img, 2.0))


def test_empty_mask_is_identity(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    out = obfuscate(img, np.zeros((8, 8), bool), ObfuscationSpec())
    np.testing.assert_array_equal(out, img)


@pytest.mark.parametrize("kw", [{"kind": "pixelate"}, {"region": "face"},
                                {"noise_amplitude": 0.0}, {"sigma": -1.0}])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        ObfuscationSpec(**kw)


def test_spec_dict_round_trip():
    for spec in (ObfuscationSpec("noise", "object", 4, 0.5), ObfuscationSpec("blur", "scene", sigma=3.0)):
        assert ObfuscationSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=50, deadline=None)
@given(h=st.integers(2, 20), w=st.integers(2, 20), kind=st.sampled_from(["noise", "blur"]),
       seed=st.integers(0, 2**32 - 1))
def test_obfuscation_locality(h, w, kind, seed):
    gen = np.random.default_rng(seed)
    img = gen.uniform(0, 1, (h, w, 3))
    mask = gen.uniform(size=(h, w)) < 0.4
    out = obfuscate(img, mask, ObfuscationSpec(kind, "object", noise_seed=seed % 1000, sigma=1.5))
    np.testing.assert_array_equal(out[~mask], img[~mask])


def test_transformer(rng):
    x = rng.uniform(0, 1, (2, 8, 8, 3))
    out = Obfuscator(kind="blur", sigma=1.0).fit(x).transform(x)
    np.testing.assert_allclose(out[0], gaussian_blur(x[0], 1.0))
