import numpy as np
import pytest
import torch
from scipy.ndimage import minimum_filter, maximum_filter

from cosingan import augment as aug
from cosingan.core import ConfigError, StateError, build_scale_schedule, decode_mask, encode_mask, resize_mask
from cosingan.data import PhantomSpec, make_phantom_corpus
from cosingan.nets import GeneratorSpec, TwoStageGenerator, UNetGenerator, generator_in_channels
from cosingan.trainer import GeneratorStack

N_DRAWS = 500


@pytest.fixture(scope="module")
def phantoms():
    return make_phantom_corpus(PhantomSpec(size=32), 24, seed=5)


def _interior(mask, margin=2):
    # pixels whose (2*margin+1)^2 neighbourhood holds a single class
    size = 2 * margin + 1
    return minimum_filter(mask, size, mode="nearest") == maximum_filter(mask, size, mode="nearest")


def test_policy_defaults_and_validation():
    sa, wa = aug.AugmentPolicy.strong(), aug.AugmentPolicy.weak()
    assert (sa.crop_min_frac, sa.use_elastic) == (0.5, True)
    assert (wa.crop_min_frac, wa.use_elastic) == (0.75, False)
    with pytest.raises(ConfigError):
        aug.AugmentPolicy(kind="WA", use_elastic=True)
    with pytest.raises(ConfigError):
        aug.AugmentPolicy(crop_min_frac=0.0)
    with pytest.raises(ConfigError):
        aug.AugmentPolicy(intensity=1.5)


def test_draw_property_suite(phantoms):
    """500 random draws: label preservation, image/mask pairing, WA never elastic."""
    rng = np.random.default_rng(0)
    sched = build_scale_schedule(32, 3, "desk")
    n_checked = 0
    for k in range(N_DRAWS):
        s = phantoms[k % len(phantoms)]
        base = aug.AugmentPolicy.strong() if k % 2 == 0 else aug.AugmentPolicy.weak()
        policy = aug.policy_for_scale(base, sched, k % len(sched))
        d = aug.sample_draw(policy, s.mask.shape, rng)
        if policy.kind == "WA":
            assert d.elastic_field is None
        else:
            assert d.elastic_field is not None and d.elastic_field.shape == (2, 32, 32)
        frac = d.crop_box[2]
        assert policy.effective_min_frac - 1e-12 <= frac <= 1.0
        assert abs(d.rotation_deg) <= policy.rotation_max_deg
        # the image IS the encoded mask, so the two warps must agree away from class boundaries
        enc = encode_mask(s.mask, torch.float64)[0, 0].numpy()
        img2, mask2 = aug.apply_draw(d, enc, s.mask)
        assert set(np.unique(mask2)) <= set(np.unique(s.mask))
        # interior: the nearest source pixel lies >= 2 px from any class boundary, so all
        # four bilinear taps share its class
        inner = aug.apply_draw(d, mask=_interior(s.mask).astype(np.int64))[1].astype(bool)
        n_checked += int(inner.sum())
        np.testing.assert_array_equal(decode_mask(img2)[inner], mask2[inner])
    assert n_checked > N_DRAWS * 100


def test_sa_intensity_schedule():
    sched = build_scale_schedule(64, 4, "desk")
    vals = [aug.sa_intensity_for_scale(sched, i) for i in range(len(sched))]
    assert vals[0] == 1.0 and vals[-1] == pytest.approx(0.25)
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    wa = aug.AugmentPolicy.weak()
    assert all(aug.policy_for_scale(wa, sched, i) == wa for i in range(len(sched)))
    with pytest.raises(IndexError):
        aug.sa_intensity_for_scale(sched, 4)


def test_intensity_zero_degenerates():
    p = aug.AugmentPolicy.strong(intensity=0.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = aug.sample_draw(p, (16, 16), rng)
        assert d.crop_box[2] == pytest.approx(1.0)
        assert np.abs(d.elastic_field).max() == pytest.approx(0.0, abs=1e-12)


def test_draw_determinism(phantoms):
    s = phantoms[0]
    p = aug.AugmentPolicy.strong()
    a = aug.sample_draw(p, (32, 32), 1234)
    b = aug.sample_draw(p, (32, 32), 1234)
    assert a.rng_seed == 1234
    assert a.crop_box == b.crop_box and np.array_equal(a.elastic_field, b.elastic_field)
    ia, ma = aug.apply_draw(a, s.image, s.mask)
    ib, mb = aug.apply_draw(b, s.image, s.mask)
    assert np.array_equal(ia, ib) and np.array_equal(ma, mb)


def test_identity_draw_is_noop(phantoms):
    s = phantoms[1]
    img, mask = aug.apply_draw(aug.IDENTITY_DRAW, s.image, s.mask)
    assert np.array_equal(img, s.image) and np.array_equal(mask, s.mask)


def test_flip_is_involution(phantoms):
    s = phantoms[2]
    d = aug.AugmentDraw(flip_h=True)
    once = aug.apply_draw(d, s.image, s.mask)
    twice = aug.apply_draw(d, *once)
    assert np.array_equal(twice[0], s.image) and np.array_equal(twice[1], s.mask)
    assert np.array_equal(once[1], s.mask[:, ::-1])
    dv = aug.AugmentDraw(flip_v=True)
    assert np.array_equal(aug.apply_draw(dv, mask=s.mask)[1], s.mask[::-1])


def test_apply_draw_rejects_bad_inputs(phantoms):
    s = phantoms[0]
    with pytest.raises(ValueError):
        aug.apply_draw(aug.IDENTITY_DRAW, s.image, s.mask[:-1])
    with pytest.raises(ValueError):
        aug.apply_draw(aug.IDENTITY_DRAW)
    with pytest.raises(RuntimeError):
        aug.apply_draw(aug.AugmentDraw(crop_box=(0.6, 0.0, 0.5, 0.5)), s.image, s.mask)
    with pytest.raises(ValueError):
        aug.sample_draw(aug.AugmentPolicy.weak(), (4, 4), 0)


def _random_stack(sched, upto):
    torch.manual_seed(0)
    stack = GeneratorStack(sched)
    for i in range(upto):
        two = TwoStageGenerator(UNetGenerator(GeneratorSpec(sched.gen_depths[i], generator_in_channels(i), 8)), i)
        two.init_restore()
        stack.gens.append(two)
    return stack.freeze()


def test_cascade_input_scale0(phantoms):
    sched = build_scale_schedule(32, 3, "desk")
    prev, c0 = aug.augmented_cascade_input(None, phantoms[0].mask, aug.IDENTITY_DRAW, sched, 0)
    assert prev is None
    assert np.array_equal(c0, resize_mask(phantoms[0].mask, sched.scales[0]))


def test_cascade_identity_matches_plain_cascade(phantoms):
    sched = build_scale_schedule(32, 3, "desk")
    stack = _random_stack(sched, 2)
    m = phantoms[3].mask
    prev, c2 = aug.augmented_cascade_input(stack, m, aug.IDENTITY_DRAW, sched, 2)
    conds = [encode_mask(resize_mask(m, sched.scales[j])) for j in range(2)]
    expect = aug.run_cascade(stack, conds, 1)
    assert torch.equal(prev, expect)
    assert prev.shape[-2:] == sched.scales[1]
    assert np.array_equal(c2, m)


def test_cascade_different_draws_differ(phantoms):
    sched = build_scale_schedule(32, 3, "desk")
    stack = _random_stack(sched, 1)
    p = aug.AugmentPolicy.strong()
    d1, d2 = aug.sample_draw(p, (32, 32), 1), aug.sample_draw(p, (32, 32), 2)
    a, _ = aug.augmented_cascade_input(stack, phantoms[4].mask, d1, sched, 1)
    b, _ = aug.augmented_cascade_input(stack, phantoms[4].mask, d2, sched, 1)
    assert not torch.equal(a, b)


def test_cascade_needs_trained_prefix(phantoms):
    sched = build_scale_schedule(32, 3, "desk")
    with pytest.raises(StateError):
        aug.augmented_cascade_input(_random_stack(sched, 1), phantoms[0].mask, aug.IDENTITY_DRAW, sched, 2)


def test_augmented_targets_shapes(phantoms):
    sched = build_scale_schedule(32, 3, "desk")
    draws = [aug.sample_draw(aug.AugmentPolicy.strong(), (32, 32), k) for k in range(3)]
    t = aug.augmented_targets(phantoms[0].image, draws, sched, 1)
    assert t.shape == (3, 24, 24) and t.min() >= -1 and t.max() <= 1
