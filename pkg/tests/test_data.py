import json

import numpy as np
import pytest
from scipy.ndimage import label

from cosingan.core import INFECTION, LUNG, ConfigError
from cosingan.data import (PhantomSpec, histogram_distance, ingest_volume, load_corpus, make_phantom_corpus,
                           read_volume, remap_labels, save_corpus, write_raw_volume)
from cosingan.evaluation import EvalCorpus, infection_label


def test_phantom_determinism_and_grouping():
    a = make_phantom_corpus(PhantomSpec(size=32), 14, seed=3)
    b = make_phantom_corpus(PhantomSpec(size=32), 14, seed=3)
    assert len(a) == 14
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    assert a.scan_ids.count("train000") == 6 and a.scan_ids.count("train002") == 2
    assert [s.modality_tag for s in a][::6] == [0, 1, 0]
    c = make_phantom_corpus(PhantomSpec(size=32), 14, seed=4)
    assert not np.array_equal(a[0].image, c[0].image)


def test_phantom_value_ranges_and_classes():
    corpus = make_phantom_corpus(PhantomSpec(size=48), 36, seed=0)
    for s in corpus:
        assert s.image.shape == (48, 48) and s.image.min() >= -1 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, LUNG, INFECTION}
        assert (s.mask == LUNG).any()
        # infection is carved out of the lungs, so lung+infection stays one or two lobes
        lobes = label((s.mask > 0))[1]
        assert lobes in (1, 2)
    labels = [infection_label(s.mask) for s in corpus]
    assert 0 < sum(labels) < len(labels)


def test_modalities_have_distinct_histograms():
    corpus = make_phantom_corpus(PhantomSpec(size=32), 24, seed=1)
    m0 = np.stack([s.image for s in corpus if s.modality_tag == 0])
    m1 = np.stack([s.image for s in corpus if s.modality_tag == 1])
    same = histogram_distance(m0[:3], m0[3:])
    assert histogram_distance(m0, m1) > 0.5 > same


def test_phantom_rejects_empty():
    with pytest.raises(ConfigError):
        make_phantom_corpus(n=0)


def test_remap_labels():
    assert remap_labels(np.array([0, 1, 2, 3])).tolist() == [0, 1, 1, 2]
    assert remap_labels(np.array([0, 5]), {0: 0, 5: 2}).tolist() == [0, 2]
    with pytest.raises(ValueError):
        remap_labels(np.array([4]))


def _volume(rng, z=10, h=20, w=20):
    img = rng.uniform(-1000, 400, (z, h, w)).astype(np.float32)
    lbl = np.zeros((z, h, w), np.uint8)
    lbl[:, 4:10, 3:8] = 1
    lbl[:, 4:10, 12:17] = 2
    lbl[:, 6:8, 4:6] = 3
    return img, lbl


def test_ingest_raw_volume(tmp_path, rng):
    img, lbl = _volume(rng)
    hdr = write_raw_volume(tmp_path / "vol" / "scanA.json", img, lbl, intensity_range=(-1000, 400))
    samples = ingest_volume(hdr, tmp_path / "out", modality_tag=1)
    assert len(samples) == 10
    assert len(list((tmp_path / "out").glob("*_image.png"))) == 10
    s = samples[3]
    assert s.scan_id == "scanA" and s.name == "scanA_0003" and s.modality_tag == 1
    assert np.array_equal(s.mask, remap_labels(lbl[3]))
    np.testing.assert_allclose(s.image, (img[3] + 1000) / 1400 * 2 - 1, atol=1e-6)
    resized = ingest_volume(hdr, tmp_path / "small", size=16)
    assert resized[0].image.shape == (16, 16) and set(np.unique(resized[0].mask)) <= {0, 1, 2}


def test_ingest_rejects_misaligned_volume(tmp_path, rng):
    img, lbl = _volume(rng)
    with pytest.raises(ValueError):
        write_raw_volume(tmp_path / "bad.json", img, lbl[:-1])
    hdr = write_raw_volume(tmp_path / "v.json", img, lbl)
    h = json.loads(hdr.read_text())
    h["shape"] = [10, 20, 21]
    hdr.write_text(json.dumps(h))
    with pytest.raises(ValueError):
        read_volume(hdr)
    h["format"] = "other"
    hdr.write_text(json.dumps(h))
    with pytest.raises(ConfigError):
        read_volume(hdr)


def test_corpus_roundtrip(tmp_path):
    corpus = make_phantom_corpus(PhantomSpec(size=32), 7, seed=2, split="test")
    save_corpus(corpus, tmp_path)
    back = load_corpus(tmp_path)
    assert back.split == "test" and len(back) == 7
    for a, b in zip(corpus, back):
        assert a.name == b.name and a.scan_id == b.scan_id and a.modality_tag == b.modality_tag
        assert np.array_equal(a.mask, b.mask)
        # 8-bit storage
        assert np.abs(a.image - b.image).max() <= 1.0 / 255 + 1e-9


def test_load_synthesized_layout(tmp_path):
    from cosingan.core import save_image_png, save_mask_png

    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    for k in range(3):
        save_image_png(tmp_path / "images" / f"scan7_{k:04d}.png", np.zeros((8, 8)))
        save_mask_png(tmp_path / "masks" / f"scan7_{k:04d}.png", np.ones((8, 8), int))
    c = load_corpus(tmp_path)
    assert len(c) == 3 and set(c.scan_ids) == {"scan7"}


def test_load_missing_corpus(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path / "nope")
    assert len(load_corpus(tmp_path)) == 0
    assert isinstance(load_corpus(tmp_path), EvalCorpus)
