import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from volcon.augment import (
    AugmentParams, AugmentSpec, CropBox, apply, apply_set, draw_params, identity_params, resize_bilinear,
)
from volcon.errors import ContractError


def test_full_scale_crop_is_full_frame(rng):
    spec = AugmentSpec(out_size=16, crop_scale_range=(1.0, 1.0))
    for _ in range(20):
        assert draw_params(spec, (16, 16), rng).crop == CropBox(0, 0, 16, 16)


def test_draw_is_seeded():
    spec = AugmentSpec()
    a = draw_params(spec, (40, 30), np.random.default_rng(3))
    b = draw_params(spec, (40, 30), np.random.default_rng(3))
    assert a == b


def test_flip_frequency_in_binomial_band(rng):
    spec = AugmentSpec(hflip_prob=0.5)
    n = 100_000
    flips = sum(draw_params(spec, (8, 8), rng).flip for _ in range(n))
    assert stats.binomtest(flips, n, 0.5).pvalue > 0.01


def test_identity_params_leave_input_unchanged(rng):
    img = rng.uniform(size=(12, 12, 2))
    assert np.array_equal(apply(identity_params((12, 12)), img), img)


def test_double_flip_is_identity(rng):
    img = rng.uniform(size=(10, 10, 1))
    p = AugmentParams(CropBox(1, 2, 7, 6), 10, flip=True)
    once = apply(p, img)
    plain = apply(AugmentParams(CropBox(1, 2, 7, 6), 10, flip=False), img)
    assert np.array_equal(once[:, ::-1], plain)


@given(st.integers(0, 2**32 - 1))
def test_constant_image_stays_constant_without_jitter(seed):
    spec = AugmentSpec(out_size=12, jitter_enabled=False)
    rng = np.random.default_rng(seed)
    p = draw_params(spec, (20, 17), rng)
    out = apply(p, np.full((20, 17, 1), 0.5))
    assert out.shape == (12, 12, 1)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_output_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(16, 16, 3))
    out = apply(draw_params(AugmentSpec(out_size=8), (16, 16), rng), img)
    assert out.shape == (8, 8, 3) and out.min() >= 0.0 and out.max() <= 1.0


def test_resize_of_linear_ramp_is_exact():
    ramp = np.tile(np.arange(8.0)[None, :, None], (4, 1, 1))
    out = resize_bilinear(ramp, 4, 4)
    np.testing.assert_allclose(out[0, :, 0], [0.5, 2.5, 4.5, 6.5])


def test_set_of_identical_slices_gives_identical_views(rng):
    img = rng.uniform(size=(20, 20, 1))
    views, params = apply_set(AugmentSpec(out_size=8), [img] * 3, rng)
    assert all(np.array_equal(v, views[0]) for v in views)
    assert len({p.crop for p in params}) == 1


def test_single_slice_set_matches_plain_apply():
    img = np.random.default_rng(0).uniform(size=(20, 20, 1))
    spec = AugmentSpec(out_size=8)
    views, _ = apply_set(spec, [img], np.random.default_rng(5))
    ref = apply(draw_params(spec, (20, 20), np.random.default_rng(5)), img)
    assert np.array_equal(views[0], ref)


def test_crop_only_sharing_keeps_crop_box(rng):
    slices = [rng.uniform(size=(20, 20, 1)) for _ in range(4)]
    _, params = apply_set(AugmentSpec(out_size=8, share_full_transform=False), slices, rng)
    assert len({p.crop for p in params}) == 1


def test_spec_validation_and_dict_round_trip():
    spec = AugmentSpec(crop_scale_range=(0.5, 1.0))
    assert AugmentSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ContractError, match="unknown augment key"):
        AugmentSpec.from_dict({"crop_scale": 1})
    with pytest.raises(ContractError):
        AugmentSpec(crop_scale_range=(0.0, 1.0))
    with pytest.raises(ContractError):
        apply_set(AugmentSpec(), [np.zeros((4, 4, 1)), np.zeros((5, 4, 1))], np.random.default_rng(0))
