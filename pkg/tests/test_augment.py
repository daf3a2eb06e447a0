import colorsys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resmoco.augment import (
    AugmentParams,
    augment,
    augment_batch,
    blur_kernel_size,
    center_view,
    cifar_pair,
    color_jitter,
    gaussian_blur,
    hsv_to_rgb,
    make_views,
    make_views_batch,
    resize_bilinear,
    rgb_to_hsv,
    sample_crop,
    solarize,
)

MEAN, STD = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)


@pytest.fixture
def img(rng):
    return rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)


def test_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(blur_p=1.5)
    with pytest.raises(ValueError):
        AugmentParams(min_scale=0.0)
    with pytest.raises(ValueError):
        AugmentParams(hue=0.6)


def test_cifar_pair_values():
    t1, t2 = cifar_pair()
    assert (t1.min_scale, t1.crop_size, t1.brightness, t1.contrast, t1.saturation, t1.hue) == (0.2, 32, 0.4, 0.4, 0.2, 0.1)
    assert (t1.blur_p, t1.solarize_p, t2.blur_p, t2.solarize_p) == (1.0, 0.0, 0.1, 0.2)
    s1, s2 = cifar_pair(strict=True)
    assert s1.hflip_p == 0 and s2.jitter_apply_p == 1


def test_degenerate_params_give_plain_resize(img):
    p = AugmentParams(min_scale=1.0, crop_size=10, crop_p=0, jitter_apply_p=0, blur_p=0, solarize_p=0, hflip_p=0)
    rng = np.random.default_rng(0)
    out = augment(img, p, rng)
    np.testing.assert_allclose(out, resize_bilinear(img.astype(float), 0, 0, 12, 10, 10))


def test_resize_same_size_is_identity(img):
    square = img[:10, :10].astype(float)
    np.testing.assert_allclose(resize_bilinear(square, 0, 0, 10, 10, 10), square)


def test_solarize_pixel():
    assert solarize(np.array([200.0]))[0] == 55.0
    assert solarize(np.array([127.0]))[0] == 127.0
    assert solarize(np.array([128.0]))[0] == 127.0


@given(st.lists(st.integers(0, 255), min_size=1, max_size=30))
def test_solarize_involution_on_mask(vals):
    x = np.array(vals, dtype=float)
    mask = x >= 128
    once = solarize(x)
    twice = np.where(mask, 255 - once, once)
    np.testing.assert_array_equal(twice, x)


def test_views_deterministic(img):
    t1, t2 = cifar_pair(16)
    a, b = make_views(img, t1, t2, 99, MEAN, STD), make_views(img, t1, t2, 99, MEAN, STD)
    assert a.x1.tobytes() == b.x1.tobytes() and a.x2.tobytes() == b.x2.tobytes()
    c = make_views(img, t1, t2, 100, MEAN, STD)
    assert c.x1.tobytes() != a.x1.tobytes()


def test_views_shape_and_dtype(img):
    v = make_views(img, *cifar_pair(16), 1, MEAN, STD)
    assert v.x1.shape == (3, 16, 16) and v.x1.dtype == np.float32 and np.isfinite(v.x2).all()


def test_batch_path_matches_single_image_path(rng):
    imgs = rng.integers(0, 256, (6, 12, 12, 3), dtype=np.uint8)
    t1, t2 = cifar_pair(8)
    seeds = [11, 12, 13, 14, 15, 16]
    batch = make_views_batch(imgs, t1, t2, seeds, MEAN, STD)
    for i, s in enumerate(seeds):
        single = make_views(imgs[i], t1, t2, s, MEAN, STD)
        np.testing.assert_array_equal(batch.x1[i], single.x1)
        np.testing.assert_array_equal(batch.x2[i], single.x2)


@given(st.integers(0, 2**32 - 1))
def test_normalized_range(seed):
    img = np.random.default_rng(seed).integers(0, 256, (10, 10, 3), dtype=np.uint8)
    mean, std = (0.45, 0.5, 0.4), (0.22, 0.25, 0.2)
    v = make_views(img, *cifar_pair(8), seed, mean, std)
    lo = (0 - np.array(mean)) / np.array(std)
    hi = (1 - np.array(mean)) / np.array(std)
    for x in (v.x1, v.x2):
        assert np.all(np.abs(x) <= 5)
        assert np.all(x >= lo[:, None, None] - 1e-5) and np.all(x <= hi[:, None, None] + 1e-5)


@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_crop_geometry(h, w, min_scale, seed):
    top, left, ch, cw = sample_crop(np.random.default_rng(seed), h, w, min_scale)
    assert 0 <= top and top + ch <= h and 0 <= left and left + cw <= w
    assert min_scale - 1e-12 <= ch * cw / (h * w) <= 1


def test_hsv_round_trip_matches_colorsys(rng):
    rgb = rng.random((50, 3))
    hsv = rgb_to_hsv(rgb)
    ref = np.array([colorsys.rgb_to_hsv(*px) for px in rgb])
    np.testing.assert_allclose(hsv, ref, atol=1e-12)
    np.testing.assert_allclose(hsv_to_rgb(hsv), rgb, atol=1e-12)


def test_jitter_neutral_factors_are_identity(rng):
    x = rng.uniform(0, 255, (2, 5, 5, 3))
    np.testing.assert_allclose(color_jitter(x, 1.0, 1.0, 1.0, 0.0), x, atol=1e-9)


def test_hue_shift_wraps():
    red = np.full((1, 1, 1, 3), [255.0, 0.0, 0.0])
    np.testing.assert_allclose(color_jitter(red, 1, 1, 1, 1 / 3)[0, 0, 0], [0, 255, 0], atol=1e-9)
    np.testing.assert_allclose(color_jitter(red, 1, 1, 1, -1 / 3)[0, 0, 0], [0, 0, 255], atol=1e-9)


def test_blur_kernel_size():
    assert blur_kernel_size(32) == 3
    assert blur_kernel_size(224) == 23
    assert blur_kernel_size(16) == 3
    assert blur_kernel_size(5) == 1


def test_blur_preserves_constant_image():
    x = np.full((2, 8, 8, 3), 77.0)
    np.testing.assert_allclose(gaussian_blur(x, [0.5, 1.7], 3), x)


def test_center_view_resizes(img):
    assert center_view(img, 8, MEAN, STD).shape == (3, 8, 8)


def test_augment_batch_is_per_sample(rng):
    imgs = rng.integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    p = cifar_pair(8)[0]
    full = augment_batch(imgs, p, [np.random.default_rng(s) for s in (1, 2, 3)])
    part = augment_batch(imgs[1:2], p, [np.random.default_rng(2)])
    np.testing.assert_array_equal(full[1], part[0])
