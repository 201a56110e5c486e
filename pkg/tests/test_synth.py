import itertools

import numpy as np
import pytest

from finprint.core import FinprintError, RngState, Sample, Split
from finprint.synth import (
    BACKGROUND,
    AugmentParams,
    IdentitySpec,
    Spot,
    augment,
    build_dataset,
    dataset_counts,
    gen_identities,
    pattern_margin,
    render,
    transform,
)


def test_single_identity():
    specs = gen_identities(1, 8, RngState(1))
    assert len(specs) == 1 and len(specs[0].spots) == 8


def test_identities_deterministic():
    a = gen_identities(2, 8, RngState(3))
    b = gen_identities(2, 8, RngState(3))
    assert a == b
    assert a != gen_identities(2, 8, RngState(4))


def test_forty_identities_pairwise_separable():
    specs = gen_identities(40, 12, RngState(7))
    for s, t in itertools.combinations(specs, 2):
        assert pattern_margin(s, t) > 0


def test_margin_of_a_pattern_with_itself_is_negative():
    s = gen_identities(1, 5, RngState(0))[0]
    assert pattern_margin(s, s) < 0


def test_unsatisfiable_separation_raises():
    # a single big spot always lands within 2r of the first identity's spot
    with pytest.raises(FinprintError, match="fewer spots"):
        gen_identities(400, 1, RngState(0), max_retries=3)


def test_render_noise_free_is_deterministic():
    spec = gen_identities(1, 8, RngState(2))[0]
    a = render(spec, (64, 64), None, noise_sigma=0.0)
    b = render(spec, (64, 64), None, noise_sigma=0.0)
    assert np.array_equal(a.pixels, b.pixels)


def test_zero_intensity_spots_give_blank_head():
    spots = (Spot(0.5, 0.5, 0.05, 0.0), Spot(0.3, 0.6, 0.05, 0.0))
    blank = render(IdentitySpec(0, spots, 0.8), (64, 64), None, noise_sigma=0.0).pixels[:, :, 0]
    assert blank[32, 32] == pytest.approx(0.8)
    assert blank[0, 0] == pytest.approx(BACKGROUND)
    # symmetric about the centre lines, i.e. no spot left a mark
    assert np.allclose(blank, blank[::-1, :]) and np.allclose(blank, blank[:, ::-1])


def test_mean_intensity_sane():
    specs = gen_identities(10, 8, RngState(11))
    means = [render(specs[i % 10], (64, 64), RngState(11, ("r", i))).pixels.mean() for i in range(100)]
    assert 0.2 <= min(means) and max(means) <= 0.9


def test_render_channels_and_range():
    spec = gen_identities(1, 8, RngState(2))[0]
    s = render(spec, (48, 40), RngState(5), channels=3, sample_id=9, split=Split.TEST)
    assert s.pixels.shape == (48, 40, 3)
    assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0
    assert s.sample_id == 9 and s.split is Split.TEST


def _sample(seed=0):
    spec = gen_identities(1, 8, RngState(seed))[0]
    return render(spec, (64, 64), RngState(seed, ("px",)), sample_id=10)


def test_augment_zero_copies():
    assert augment(_sample(), AugmentParams(copies_per_image=0), RngState(1)) == []


def test_identity_transform_is_exact():
    s = _sample()
    assert np.array_equal(transform(s.pixels, 0.0, 0.0, 1.0), s.pixels)
    p = AugmentParams(tilt_max_deg=0, vshift_max_frac=0, brightness_range=(1.0, 1.0), copies_per_image=2)
    for c in augment(s, p, RngState(1)):
        assert np.array_equal(c.pixels, s.pixels)


def test_default_augment():
    s = _sample()
    out = augment(s, AugmentParams(), RngState(4))
    assert len(out) == 5
    assert [c.sample_id for c in out] == [11, 12, 13, 14, 15]
    for c in out:
        assert c.identity == s.identity and c.split == s.split and c.augmented_from == 10
        assert c.pixels.min() >= 0.0 and c.pixels.max() <= 1.0
        assert not np.array_equal(c.pixels, s.pixels)


def test_shift_moves_content_down():
    img = np.zeros((20, 20, 1))
    img[5, 10, 0] = 1.0
    out = transform(img, 0.0, 3.0, 1.0)
    assert out[8, 10, 0] == pytest.approx(1.0)
    assert out[5, 10, 0] == pytest.approx(0.0)


def test_brightness_clamps():
    img = np.full((4, 4, 1), 0.9)
    assert np.all(transform(img, 0.0, 0.0, 1.3) == 1.0)


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(brightness_range=(1.1, 1.3))
    with pytest.raises(ValueError):
        AugmentParams(copies_per_image=-1)


def test_build_dataset_counts_and_split():
    ds = build_dataset(10, 10, AugmentParams(), 0.9, RngState(3))
    assert len(ds.samples) == 600
    assert dataset_counts(ds.samples) == {"train": 540, "test": 60}
    assert [s.sample_id for s in ds.samples] == list(range(600))
    for ident in range(10):
        splits = {s.split for s in ds.samples if s.identity == ident}
        assert splits == {Split.TRAIN, Split.TEST}
    # copies share the split of their original
    by_id = {s.sample_id: s for s in ds.samples}
    for s in ds.samples:
        if s.augmented_from is not None:
            assert by_id[s.augmented_from].split == s.split


def test_build_dataset_split_by_identity():
    ds = build_dataset(10, 3, AugmentParams(copies_per_image=1), 0.8, RngState(3), split_by_identity=True)
    test_ids = {s.identity for s in ds.test}
    train_ids = {s.identity for s in ds.train}
    assert len(test_ids) == 2 and not test_ids & train_ids


def test_build_dataset_deterministic():
    a = build_dataset(3, 2, AugmentParams(copies_per_image=2), 0.5, RngState(9))
    b = build_dataset(3, 2, AugmentParams(copies_per_image=2), 0.5, RngState(9))
    for s, t in zip(a.samples, b.samples):
        assert np.array_equal(s.pixels, t.pixels) and s.split == t.split
