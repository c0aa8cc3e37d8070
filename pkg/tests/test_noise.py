import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import convolve1d

from reluconf.errors import ValidationError
from reluconf.noise import (NoiseConfig, NoiseStream, blur_matrix, contrast_rescale, gaussian_kernel,
                            gaussian_lowpass, generate_noise_batch, permute_pixels)


def blur_direct(img, sigma):
    """Full 2-d convolution with the outer-product kernel on a symmetric-padded image."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    k2 = np.outer(k, k)
    p = np.pad(img, r, mode="symmetric")
    H, W = img.shape
    out = np.zeros_like(img)
    for i in range(H):
        for j in range(W):
            out[i, j] = np.sum(p[i:i + 2 * r + 1, j:j + 2 * r + 1] * k2)
    return out


def test_kernel_shape_and_normalization():
    for sigma in (0.5, 1.0, 2.5):
        k = gaussian_kernel(sigma)
        assert len(k) == 2 * int(np.ceil(3 * sigma)) + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(k, k[::-1])
    np.testing.assert_array_equal(gaussian_kernel(0.0), [1.0])
    with pytest.raises(ValidationError):
        gaussian_kernel(-1.0)


@pytest.mark.parametrize("sigma", [1.0, 1.7, 2.5])
def test_lowpass_matches_direct_convolution(sigma):
    img = np.random.default_rng(0).uniform(size=(28, 28))
    np.testing.assert_allclose(gaussian_lowpass(img, sigma), blur_direct(img, sigma), atol=1e-10)


def test_lowpass_matches_scipy_reflect_mode():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(3, 12, 9))
    k = gaussian_kernel(1.3)
    ref = convolve1d(convolve1d(img, k, axis=1, mode="reflect"), k, axis=2, mode="reflect")
    np.testing.assert_allclose(gaussian_lowpass(img, 1.3), ref, atol=1e-12)


def test_blur_rows_sum_to_one_even_when_kernel_exceeds_image():
    M = blur_matrix(4, 2.5)
    np.testing.assert_allclose(M.sum(axis=1), 1.0)
    img = np.random.default_rng(2).uniform(size=(4, 4))
    np.testing.assert_allclose(gaussian_lowpass(img, 2.5), blur_direct(img, 2.5), atol=1e-10)


def test_sigma_zero_is_identity():
    img = np.random.default_rng(3).uniform(size=(5, 5))
    np.testing.assert_array_equal(gaussian_lowpass(img, 0.0), img)


def test_contrast_rescale():
    out = contrast_rescale(np.array([[2.0, 4.0], [3.0, 6.0]]))
    np.testing.assert_allclose(out, [[0.0, 0.5], [0.25, 1.0]])
    np.testing.assert_array_equal(contrast_rescale(np.full((3, 3), 0.7)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_permutation_keeps_pixel_multiset(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(3, 5, 5))
    out = permute_pixels(img, rng)
    np.testing.assert_array_equal(np.sort(out.reshape(3, -1), axis=1), np.sort(img.reshape(3, -1), axis=1))
    # channels travel together
    cols = {tuple(c) for c in img.reshape(3, -1).T}
    assert {tuple(c) for c in out.reshape(3, -1).T} == cols


def test_batch_shape_range_and_determinism():
    rng = np.random.default_rng(4)
    train = rng.uniform(size=(20, 1, 28, 28))
    cfg = NoiseConfig(seed=7)
    a = generate_noise_batch(cfg, train, 10)
    b = generate_noise_batch(cfg, train, 10)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (10, 1, 28, 28)
    assert a.min() == 0.0 and a.max() == 1.0
    np.testing.assert_allclose(a.reshape(10, -1).min(axis=1), 0.0)
    np.testing.assert_allclose(a.reshape(10, -1).max(axis=1), 1.0)
    c = generate_noise_batch(NoiseConfig(seed=8), train, 10)
    assert not np.array_equal(a, c)


def test_noise_is_smoother_than_white_noise():
    rng = np.random.default_rng(5)
    noise = generate_noise_batch(NoiseConfig(permuted_fraction=0.0, seed=1), None, 20)
    white = rng.uniform(size=noise.shape)
    def roughness(x):
        return np.mean(np.abs(np.diff(x, axis=-1)))
    assert roughness(noise) < 0.5 * roughness(white)


def test_permuted_half_needs_training_images():
    with pytest.raises(ValidationError):
        generate_noise_batch(NoiseConfig(), None, 4)
    with pytest.raises(ValidationError):
        NoiseConfig(sigma_range=(2.0, 1.0))
    with pytest.raises(ValidationError):
        NoiseConfig(permuted_fraction=1.5)


def test_vector_inputs_skip_smoothing():
    train = np.random.default_rng(6).uniform(size=(10, 2))
    out = generate_noise_batch(NoiseConfig(image_shape=(2,), seed=3), train, 6)
    assert out.shape == (6, 2)
    # permuted rows are coordinate swaps of training points
    for row in out[:3]:
        assert any(np.array_equal(np.sort(row), np.sort(t)) for t in train)


def test_stream_draws_fresh_batches():
    train = np.random.default_rng(7).uniform(size=(10, 1, 8, 8))
    stream = NoiseStream(NoiseConfig(image_shape=(1, 8, 8), seed=2), train)
    a, b = stream(4), stream(4)
    assert not np.array_equal(a, b)
    again = NoiseStream(NoiseConfig(image_shape=(1, 8, 8), seed=2), train)
    np.testing.assert_array_equal(again(4), a)
