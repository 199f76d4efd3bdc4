import math

import numpy as np
import pytest

from selfobf.dataset import split_view
from selfobf.exceptions import ConfigError
from selfobf.metrics import PSNR_CAP, MetricReport, divergence, evaluate, output_distance, psnr
from selfobf.obfuscation import ObfuscationSpec, obfuscate
from selfobf.srnet import forward, init_model
from selfobf.trigger import generate_trigger

from helpers import random_model


@pytest.mark.parametrize("offset,expected", [(0.5, 20 * math.log10(2)), (0.1, 20.0)])
def test_psnr_constant_offset(offset, expected):
    a = np.full((16, 16, 3), 0.2)
    assert psnr(a + offset, a) == pytest.approx(expected, abs=1e-6)


def test_psnr_identical_is_capped():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP


def test_psnr_is_symmetric(rng):
    a, b = rng.uniform(0, 1, (2, 8, 8, 3))
    assert psnr(a, b) == psnr(b, a)


def test_output_distance():
    a = np.zeros((2, 2, 1))
    b = np.full((2, 2, 1), 0.5)
    norm, raw = output_distance(a, b)
    assert raw == pytest.approx(1.0)
    assert norm == pytest.approx(0.5)


def test_divergence_of_bicubic_model(rng):
    # an untrained model is bicubic: divergence equals the upsampled trigger change
    m = init_model(3, scale=4, n_global=0)
    x = rng.uniform(0, 1, (12, 12, 3))
    trig = generate_trigger("t", x.shape, 0.4, 0.4, 0)
    from selfobf.trigger import apply_trigger
    expected = output_distance(forward(m, apply_trigger(x, trig)), forward(m, x))
    assert divergence(m, x, trig) == pytest.approx(expected[0])
    assert divergence(m, x, trig, raw=True) == pytest.approx(expected[1])


def test_evaluate_columns(small_corpus):
    pairs = [p for p in split_view(small_corpus, "unseen") if "ellipse" in p.masks]
    m = init_model(3, scale=4, input_shape=(12, 12))
    trig = generate_trigger("ellipse", (12, 12, 3), 0.4, 0.4, 0)
    spec = ObfuscationSpec("noise", "object")
    rep = evaluate(m, pairs, trigger=trig, obfuscation=spec, target_class="ellipse")
    assert [r["pair_id"] for r in rep.rows] == sorted(p.id for p in pairs)
    p = sorted(pairs, key=lambda p: p.id)[0]
    out = forward(m, p.x_lr)
    row = rep.rows[0]
    assert row["clean_psnr_vs_clean_hr"] == pytest.approx(psnr(out, p.x_hr))
    ref = obfuscate(p.x_hr, p.mask("ellipse"), spec)
    from selfobf.trigger import apply_trigger
    assert row["psnr_vs_obfuscated_hr"] == pytest.approx(
        psnr(forward(m, apply_trigger(p.x_lr, trig)), ref))


def test_identity_perturbation(small_corpus):
    pairs = split_view(small_corpus, "unseen")
    m = random_model(n_layers=2, lr_shape=(12, 12), scale=4)
    rep = evaluate(m, pairs, perturb=lambda s: s.x_lr)
    for r in rep.rows:
        assert r["divergence"] == 0.0
        assert r["psnr_vs_clean_hr"] == r["clean_psnr_vs_clean_hr"]


def test_evaluate_argument_errors(small_corpus):
    m = init_model(3, n_global=0)
    pairs = split_view(small_corpus, "unseen")
    trig = generate_trigger("ellipse", (12, 12, 3), 0.4, 0.4, 0)
    with pytest.raises(ConfigError):
        evaluate(m, [])
    with pytest.raises(ConfigError):
        evaluate(m, pairs, trigger=trig, perturb=lambda s: s.x_lr)
    with pytest.raises(ConfigError):
        evaluate(m, pairs, trigger=trig, obfuscation=ObfuscationSpec(region="object"))


def test_csv_round_trip_and_determinism(small_corpus, tmp_path):
    pairs = split_view(small_corpus, "seen")
    m = random_model(n_layers=2, lr_shape=(12, 12), scale=4)
    trig = generate_trigger("box", (12, 12, 3), 0.4, 0.4, 0)
    a = evaluate(m, pairs, trigger=trig, obfuscation=ObfuscationSpec())
    b = evaluate(m, pairs, trigger=trig, obfuscation=ObfuscationSpec())
    assert a.to_csv_string() == b.to_csv_string()
    a.to_csv(tmp_path / "r.csv")
    back = MetricReport.from_csv(tmp_path / "r.csv")
    assert back.rows == a.rows
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[-3].startswith("#agg:mean")
    assert back.mean("divergence") == pytest.approx(np.mean(a.column("divergence")))
