import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repeatdenoise.prefilter import PrefilterParams, nlm_denoise_slice, prefilter_volume
from repeatdenoise.volume import Slice2D, Volume3D


def test_params_validation():
    with pytest.raises(ValueError):
        PrefilterParams(patch_radius=-1)
    with pytest.raises(ValueError):
        PrefilterParams(patch_radius=3, search_radius=2)
    with pytest.raises(ValueError):
        PrefilterParams(h=0.0)


def test_constant_slice_unchanged():
    s = Slice2D(np.full((9, 7), 0.42), subject=1, repeat=2, z=3)
    out = nlm_denoise_slice(s)
    np.testing.assert_allclose(out.data, 0.42, atol=1e-7)
    assert (out.subject, out.repeat, out.z) == (1, 2, 3)


def test_single_pixel_zero_search():
    s = Slice2D(np.array([[3.5]]))
    out = nlm_denoise_slice(s, PrefilterParams(patch_radius=0, search_radius=0))
    assert out.data[0, 0] == pytest.approx(3.5)


def test_outlier_with_flat_weights_becomes_window_mean():
    img = np.full((5, 5), 0.2)
    img[2, 2] = 5.0
    p = PrefilterParams(patch_radius=0, search_radius=2, h=1e6, normalize=False)
    out = nlm_denoise_slice(Slice2D(img, ), p)
    assert out.data[2, 2] == pytest.approx(img.mean(), abs=1e-6)


def test_brute_force_oracle_small_slice(rng):
    img = rng.random((7, 6))
    pr, sr, h = 1, 2, 0.3
    pad = np.pad(img, pr, mode="edge")
    ref = np.empty_like(img)
    for i in range(7):
        for j in range(6):
            p0 = pad[i:i + 2 * pr + 1, j:j + 2 * pr + 1]
            num = den = 0.0
            for a in range(max(0, i - sr), min(7, i + sr + 1)):
                for b in range(max(0, j - sr), min(6, j + sr + 1)):
                    d2 = np.mean((p0 - pad[a:a + 2 * pr + 1, b:b + 2 * pr + 1]) ** 2)
                    w = np.exp(-max(0.0, d2 - 2 * h * h) / (h * h))
                    num += w * img[a, b]
                    den += w
            ref[i, j] = num / den
    out = nlm_denoise_slice(Slice2D(img), PrefilterParams(pr, sr, h, normalize=False))
    np.testing.assert_allclose(out.data, ref, atol=1e-6)


def test_volume_of_constant_slices_unchanged():
    data = np.broadcast_to(np.linspace(0, 1, 6), (10, 9, 6)).copy()
    out = prefilter_volume(Volume3D(data))
    np.testing.assert_allclose(out.data, data, atol=1e-6)


def test_slicewise_independence(rng):
    data = np.full((16, 16, 2), 0.5)
    data[:, :, 1] += rng.normal(0, 0.1, (16, 16))
    out = prefilter_volume(Volume3D(data))
    np.testing.assert_allclose(out.data[:, :, 0], 0.5, atol=1e-6)
    assert out.data[:, :, 1].var() < data[:, :, 1].var()


def test_gaussian_noise_variance_drops():
    noise = np.random.default_rng(7).normal(0.5, 0.1, (32, 32, 1))
    out = prefilter_volume(Volume3D(noise))
    assert out.data.var() < noise.var()


@given(st.integers(0, 1000), st.floats(0.5, 20.0), st.floats(-5.0, 5.0))
def test_normalised_filter_commutes_with_intensity_affine(seed, scale, offset):
    img = np.random.default_rng(seed).random((10, 10))
    a = nlm_denoise_slice(Slice2D(img)).data.astype(np.float64)
    b = nlm_denoise_slice(Slice2D(img * scale + offset)).data.astype(np.float64)
    np.testing.assert_allclose(b, a * scale + offset, atol=1e-4 * scale)


@given(st.integers(0, 10_000))
def test_output_stays_within_slice_range(seed):
    data = np.random.default_rng(seed).normal(0.5, 0.2, (12, 10, 3))
    out = prefilter_volume(Volume3D(data)).data
    for k in range(3):
        assert out[:, :, k].min() >= data[:, :, k].min() - 1e-6
        assert out[:, :, k].max() <= data[:, :, k].max() + 1e-6


@given(st.integers(0, 10_000))
def test_slice_permutation_commutes(seed):
    rng = np.random.default_rng(seed)
    data = rng.random((10, 9, 4))
    perm = rng.permutation(4)
    a = prefilter_volume(Volume3D(data)).data[:, :, perm]
    b = prefilter_volume(Volume3D(data[:, :, perm])).data
    np.testing.assert_array_equal(a, b)


def test_shift_equivariance_on_interior(rng):
    img = rng.random((40, 40))
    p = PrefilterParams(normalize=False)
    shifted = np.roll(img, (3, -2), axis=(0, 1))
    a = np.roll(nlm_denoise_slice(Slice2D(img), p).data, (3, -2), axis=(0, 1))
    b = nlm_denoise_slice(Slice2D(shifted), p).data
    inner = (slice(12, -12), slice(12, -12))
    np.testing.assert_allclose(a[inner], b[inner], atol=1e-6)
