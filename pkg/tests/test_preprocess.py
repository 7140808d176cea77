import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bilinear_half_pixel
from wnet.preprocess import (
    PreprocessConfig,
    crop,
    crop_box,
    load_image,
    normalize,
    preprocess_pipeline,
    resize_bilinear,
)


def random_image(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_default_config_matches_recipe():
    cfg = PreprocessConfig()
    assert cfg.margins == (80, 81, 80, 80)
    assert cfg.target_size == 128


def test_default_crop_gives_200_square():
    img = random_image(361, 360)
    out = crop(img, *PreprocessConfig().margins)
    assert out.shape == (200, 200, 3)
    assert np.array_equal(out[0, 0], img[80, 80])
    assert np.array_equal(out[-1, -1], img[279, 279])


def test_zero_margins_identity():
    img = random_image(7, 9)
    assert np.array_equal(crop(img, 0, 0, 0, 0), img)


def test_center_crop_pixelwise():
    img = random_image(5, 5, seed=3)
    out = crop(img, 1, 1, 1, 1)
    assert out.shape == (3, 3, 3)
    for i in range(3):
        for j in range(3):
            assert np.array_equal(out[i, j], img[i + 1, j + 1])


def test_crop_consuming_image_rejected():
    with pytest.raises(ValueError):
        crop(random_image(10, 10), 5, 5, 0, 0)


def test_crop_then_zero_crop():
    img = random_image(20, 30)
    once = crop(img, 2, 3, 4, 5)
    assert np.array_equal(crop(once, 0, 0, 0, 0), once)


def test_crop_box():
    img = random_image(576, 720)
    out = crop_box(img, (100, 50, 150, 120))
    assert out.shape == (120, 150, 3)
    assert np.array_equal(out[0, 0], img[50, 100])
    with pytest.raises(ValueError):
        crop_box(img, (700, 0, 50, 50))


def test_resize_constant_image_exact():
    img = np.full((200, 200, 3), 173, dtype=np.uint8)
    out = resize_bilinear(img, 128)
    assert out.shape == (128, 128, 3)
    assert np.all(out == 173.0)


def test_resize_same_size_identity():
    img = random_image(16, 16)
    assert np.array_equal(resize_bilinear(img, 16), img.astype(np.float64))


def test_resize_ramp_hand_computed():
    ramp = np.arange(16, dtype=np.float64).reshape(4, 4, 1)  # value 4*row + col
    # 4 -> 2 samples source coordinates 0.5 and 2.5, i.e. the mean of each 2x2 block
    expected = [[2.5, 4.5], [10.5, 12.5]]
    out = resize_bilinear(ramp, 2)[..., 0]
    assert out.tolist() == expected
    assert bilinear_half_pixel(ramp[..., 0].tolist(), 2, 2) == expected


def test_resize_matches_pointwise_oracle():
    img = random_image(13, 11, seed=5).astype(np.float64)
    out = resize_bilinear(img, 7)
    for c in range(3):
        ref = np.array(bilinear_half_pixel(img[..., c].tolist(), 7, 7))
        np.testing.assert_allclose(out[..., c], ref, rtol=0, atol=1e-9)


def test_resize_upsample_matches_oracle():
    img = random_image(3, 4, seed=6).astype(np.float64)
    out = resize_bilinear(img, 9)
    ref = np.array(bilinear_half_pixel(img[..., 1].tolist(), 9, 9))
    np.testing.assert_allclose(out[..., 1], ref, rtol=0, atol=1e-9)


def test_resize_rejects_zero_target():
    with pytest.raises(ValueError):
        resize_bilinear(random_image(4, 4), 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3))), st.integers(1, 20))
def test_resize_stays_within_bounds(img, target):
    out = resize_bilinear(img, target)
    assert out.min() >= img.min() and out.max() <= img.max()


def test_unit_scale_extremes():
    assert not normalize(np.zeros((4, 4, 3)), "unit_scale").any()
    assert np.all(normalize(np.full((4, 4, 3), 255.0), "unit_scale") == 1.0)


def test_unit_scale_layout_and_inverse():
    img = random_image(5, 6)
    out = normalize(img, "unit_scale")
    assert out.shape == (3, 5, 6)
    np.testing.assert_allclose(out * 255.0, img.transpose(2, 0, 1), atol=1e-12)
    values = np.arange(256, dtype=np.float64)
    scaled = normalize(np.stack([values] * 3, axis=-1)[None], "unit_scale")[0, 0]
    assert np.all(np.diff(scaled) > 0)


def test_standardize_moments():
    out = normalize(random_image(128, 128, seed=8), "per_image_standardize")
    for c in range(3):
        assert abs(out[c].mean()) < 1e-6
        assert abs(out[c].std() - 1.0) < 1e-6


def test_standardize_constant_channel_uses_floor():
    img = np.full((4, 4, 3), 100.0)
    assert np.abs(normalize(img, "per_image_standardize")).max() < 1e-8


def test_pipeline_default_image():
    out = preprocess_pipeline(random_image(361, 360))
    assert out.shape == (3, 128, 128)


def test_pipeline_lisc_crop_box():
    img = random_image(576, 720, seed=2)
    out = preprocess_pipeline(img, PreprocessConfig(), box=(300, 200, 140, 150))
    assert out.shape == (3, 128, 128)


def test_pipeline_deterministic():
    img = random_image(361, 360, seed=4)
    assert preprocess_pipeline(img).tobytes() == preprocess_pipeline(img.copy()).tobytes()


def test_pipeline_rejects_grayscale():
    with pytest.raises(ValueError):
        preprocess_pipeline(np.zeros((361, 360), dtype=np.uint8))


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(normalize_scheme="zscore")
    with pytest.raises(ValueError):
        PreprocessConfig(target_size=0)


def test_load_image_png(tmp_path):
    from PIL import Image

    img = random_image(12, 10)
    Image.fromarray(img).save(tmp_path / "x.png")
    assert np.array_equal(load_image(tmp_path / "x.png"), img)
