import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cosingan import evaluation as ev
from cosingan.core import ConfigError, INFECTION, LUNG
from cosingan.data import PhantomSpec, make_phantom_corpus


def test_dsc_cases():
    t = np.zeros((20, 20), int)
    t[:10, :10] = 1  # 100 px
    assert ev.dsc(t, t, 1) == 1.0
    other = np.zeros_like(t)
    other[10:, 10:] = 1
    assert ev.dsc(other, t, 1) == 0.0
    half = np.zeros_like(t)
    half[:5, :10] = 1  # 50 px inside the target, no false positives
    assert ev.dsc(half, t, 1) == pytest.approx(2 * 50 / 150)
    assert ev.dsc(np.zeros_like(t), np.zeros_like(t), 2) == 1.0
    with pytest.raises(ValueError):
        ev.dsc(t, t[:5], 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_dsc_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, 3, (8, 8)), r.integers(0, 3, (8, 8))
    for c in range(3):
        v = ev.dsc(a, b, c)
        assert 0.0 <= v <= 1.0 and v == ev.dsc(b, a, c)


def test_perfect_classification():
    labels = np.array([0, 1, 1, 0, 1, 0])
    scans = ["a", "a", "a", "b", "b", "b"]
    rep, conf = ev.classification_metrics(labels, labels, scans)
    for m in ("sensitivity", "specificity", "accuracy"):
        assert rep[m].mean == 1.0 and rep[m].n == 2
        # identical per-scan values -> zero-width interval
        assert rep[m].ci95 == (1.0, 1.0)
    assert conf == {"a": {"tp": 2, "fp": 0, "tn": 1, "fn": 0}, "b": {"tp": 1, "fp": 0, "tn": 2, "fn": 0}}


def test_all_positive_predictor():
    labels = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    scans = ["a"] * 4 + ["b"] * 4
    rep, conf = ev.classification_metrics(np.ones_like(labels), labels, scans)
    assert rep["sensitivity"].mean == 1.0 and rep["specificity"].mean == 0.0
    assert rep["accuracy"].mean == pytest.approx(0.5)
    again = ev.metrics_from_confusion(conf)
    assert all(again[m].mean == rep[m].mean for m in rep)


def test_undefined_scans_excluded():
    # scan "b" has no positives so its sensitivity is undefined
    rep, _ = ev.classification_metrics([1, 0, 0, 0], [1, 0, 0, 0], ["a", "a", "b", "b"])
    assert rep["sensitivity"].n == 1 and rep["sensitivity"].excluded == ["b"]
    assert math.isnan(rep["sensitivity"].ci95[0])
    with pytest.raises(ValueError):
        ev.classification_metrics([], [], [])


def test_ci_matches_t_interval():
    vals = {"a": 0.5, "b": 0.7, "c": 0.9}
    r = ev.MetricsReport.from_values(vals)
    # t(0.975, 2) = 4.302652729749464, sd = 0.2
    half = 4.302652729749464 * 0.2 / math.sqrt(3)
    assert r.mean == pytest.approx(0.7)
    assert r.ci95 == pytest.approx((0.7 - half, 0.7 + half), rel=1e-9)
    assert r.fmt().startswith("0.700 (")


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_ci_contains_mean(values):
    r = ev.MetricsReport.from_values({str(k): v for k, v in enumerate(values)})
    assert r.n == len(values)
    if r.n >= 2:
        assert r.ci95[0] - 1e-12 <= r.mean <= r.ci95[1] + 1e-12


def test_segmentation_metrics_pool_per_scan():
    t = np.zeros((3, 4, 4), int)
    t[:, :2] = LUNG
    t[0, 0, 0] = INFECTION
    p = t.copy()
    p[2] = 0
    out = ev.segmentation_metrics(p, t, ["s1", "s1", "s2"])
    assert out[LUNG].per_scan == {"s1": 1.0, "s2": 0.0}
    assert out[INFECTION].per_scan["s1"] == 1.0
    assert out[INFECTION].per_scan["s2"] == 1.0  # both empty


def test_weighted_ce_perfect_and_ratio():
    labels = torch.tensor([[[0, 2]]])
    perfect = torch.full((1, 3, 1, 2), -30.0)
    perfect[0, 0, 0, 0] = perfect[0, 2, 0, 1] = 30.0
    assert ev.weighted_ce(perfect, labels).item() < 1e-12
    # uniform (wrong) logits: per-pixel contribution scales with the class weight
    logits = torch.zeros(1, 3, 1, 2, requires_grad=True)
    ev.weighted_ce(logits, labels).backward()
    g = logits.grad.abs().sum(1)[0, 0]
    assert (g[1] / g[0]).item() == pytest.approx(5.0 / 0.1)


def test_infection_label():
    m = np.zeros((8, 8), int)
    assert ev.infection_label(m) == 0
    m[3, 3] = INFECTION
    assert ev.infection_label(m) == 1
    m[:] = LUNG
    assert ev.infection_label(m) == 0


@pytest.fixture(scope="module")
def small_corpus():
    return make_phantom_corpus(PhantomSpec(size=32), 16, seed=4)


def test_segmenter_smoke_loss_decreases(small_corpus):
    corpus = ev.EvalCorpus(small_corpus.samples[:8])
    cfg = ev.ProbeTrainConfig(epochs=5, batch_size=4, lr_init=1e-3, lr_decay_start_epoch=5, augment=None)
    model, hist = ev.train_segmenter(corpus, "light", cfg)
    assert len(hist) == 5 and hist[-1] < hist[0]
    pred = ev.segment(model, corpus.images())
    assert pred.shape == (8, 32, 32) and set(np.unique(pred)) <= {0, 1, 2}


def test_classifier_smoke_and_single_class(small_corpus):
    labels = [ev.infection_label(s.mask) for s in small_corpus]
    assert set(labels) == {0, 1}
    cfg = ev.ProbeTrainConfig(epochs=5, batch_size=4, lr_init=1e-3, lr_decay_start_epoch=5, augment="WA")
    model, hist = ev.train_classifier(small_corpus, "light", cfg)
    assert hist[-1] < hist[0]
    preds, probs = ev.classify(model, small_corpus.images())
    assert preds.shape == (16,) and np.all((probs >= 0) & (probs <= 1))
    neg = ev.EvalCorpus([s for s, y in zip(small_corpus, labels) if y == 0])
    with pytest.raises(ConfigError):
        ev.train_classifier(neg, "light", cfg)


def test_probe_training_is_reproducible(small_corpus):
    corpus = ev.EvalCorpus(small_corpus.samples[:4])
    cfg = ev.ProbeTrainConfig(epochs=2, batch_size=2, lr_init=1e-3)
    _, h1 = ev.train_segmenter(corpus, "light", cfg)
    _, h2 = ev.train_segmenter(corpus, "light", cfg)
    assert h1 == h2


def test_disjoint_check(small_corpus):
    with pytest.raises(ConfigError):
        ev.check_disjoint(small_corpus, small_corpus)


def test_image_quality_on_noise_and_table(small_corpus):
    cfg = ev.ProbeTrainConfig(epochs=8, batch_size=4, lr_init=2e-3, lr_decay_start_epoch=4,
                              lr_decay_per_epoch_frac=0.2, augment=None)
    oracle, _ = ev.train_segmenter(small_corpus, "light", cfg)
    masks = small_corpus.masks()
    real = ev.image_quality_score(small_corpus.images(), masks, oracle, [s.modality_tag for s in small_corpus])
    noise = np.random.default_rng(0).uniform(-1, 1, masks.shape)
    fake = ev.image_quality_score(noise, masks, oracle)
    assert fake["overall"]["infection"] < 0.1
    assert real["overall"]["lung"] > fake["overall"]["lung"]
    assert {"modality 0", "modality 1"} <= set(real)
    table = ev.format_quality_table({"real": real, "noise": fake})
    lines = table.splitlines()
    assert "overall lung" in lines[0] and "modality 1 inf." in lines[0]
    assert lines[3].startswith("noise") and lines[3].split()[-1] == "-"
