import numpy as np
import pytest

from p4net.errors import ParameterError, ShapeError
from p4net.features import (MAPS_PER_CHANNEL, STD_FLOOR, NormStats, denormalize, fit_normalizer, normalize,
                            scatter_batch, scatter_transform)


def test_maps_per_channel_count():
    # 1 low-pass + J L first order + L^2 J (J - 1) / 2 second order with J=2, L=8
    assert MAPS_PER_CHANNEL == 1 + 2 * 8 + 8 * 8 * 1 == 81


def test_shape_law_grayscale_and_rgb():
    rng = np.random.default_rng(0)
    assert scatter_transform(rng.uniform(size=(28, 28))).shape == (81, 7, 7)
    assert scatter_transform(rng.uniform(size=(3, 32, 32))).shape == (243, 8, 8)


def test_zero_image_gives_zero_features():
    np.testing.assert_array_equal(scatter_transform(np.zeros((1, 16, 16))), 0.0)


def test_batch_matches_single_images():
    rng = np.random.default_rng(1)
    imgs = rng.uniform(size=(20, 1, 8, 8))
    batch = scatter_batch(imgs)
    np.testing.assert_allclose(batch[17], scatter_transform(imgs[17]), atol=1e-12)


def test_features_nonnegative():
    rng = np.random.default_rng(2)
    assert scatter_batch(rng.uniform(size=(4, 1, 12, 12))).min() >= 0.0


def test_translation_covariance_in_the_interior():
    rng = np.random.default_rng(3)
    img = np.zeros((40, 40))
    img[12:24, 12:24] = rng.uniform(size=(12, 12))
    a = scatter_transform(img)
    b = scatter_transform(np.roll(img, 4, axis=1))
    # a 4-pixel shift moves the pooled map by one cell
    np.testing.assert_allclose(b[:, 2:8, 3:8], a[:, 2:8, 2:7], atol=1e-8)


def test_input_validation():
    with pytest.raises(ParameterError):
        scatter_batch(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        scatter_batch(np.zeros((1, 1, 2, 8)))
    with pytest.raises(Exception):
        scatter_transform(np.full((8, 8), 2.0))


def test_normalizer_examples():
    maps = [np.zeros((1, 2, 2)), np.full((1, 2, 2), 2.0)]
    stats = fit_normalizer(maps)
    np.testing.assert_allclose(stats.mean, [1.0])
    np.testing.assert_allclose(stats.std, [1.0])
    const = fit_normalizer([np.full((2, 3, 3), 5.0)])
    np.testing.assert_allclose(const.mean, [5.0, 5.0])
    np.testing.assert_allclose(const.std, [STD_FLOOR, STD_FLOOR])
    np.testing.assert_array_equal(normalize(np.full((2, 3, 3), 5.0), const), 0.0)


def test_normalizer_deterministic_and_invertible():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(10, 3, 4, 4))
    s1, s2 = fit_normalizer(f), fit_normalizer(f)
    np.testing.assert_array_equal(s1.mean, s2.mean)
    np.testing.assert_array_equal(s1.std, s2.std)
    np.testing.assert_allclose(denormalize(normalize(f, s1), s1), f, atol=1e-9)
    ident = NormStats(np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(normalize(f[0], ident), f[0])
    z = normalize(f, s1)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, atol=1e-12)


def test_normalizer_errors():
    with pytest.raises(ParameterError):
        fit_normalizer([])
    with pytest.raises(ShapeError):
        fit_normalizer([np.zeros((1, 2, 2)), np.zeros((1, 3, 3))])
    with pytest.raises(ShapeError):
        normalize(np.zeros((2, 4, 4)), NormStats(np.zeros(3), np.ones(3)))
