import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from arcvq.errors import ShapeError
from arcvq.metrics import latent_map_rgb, principal_components, psnr, psnr_batch, ssim, ssim_batch, ssim_uses_global


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(x, x) == 100.0
    assert psnr(np.zeros(100), np.full(100, 0.1)) == pytest.approx(20.0)
    assert psnr(np.zeros(4), np.ones(4)) == 0.0
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_batch_matches_scalar():
    rng = np.random.default_rng(1)
    x, y = rng.uniform(size=(5, 6, 6)), rng.uniform(size=(5, 6, 6))
    y[2] = x[2]
    np.testing.assert_allclose(psnr_batch(x, y), [psnr(a, b) for a, b in zip(x, y)])


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))  # stays below the 100 dB cap
def test_psnr_decreases_with_mse(a, b):
    lo, hi = sorted((a, b))
    if hi > lo * (1 + 1e-9):
        assert psnr(np.zeros(1), np.full(1, hi)) < psnr(np.zeros(1), np.full(1, lo))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(28, 28))
    y = np.clip(x + rng.normal(scale=0.1 * (seed + 1), size=x.shape), 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_ssim_examples():
    x = np.random.default_rng(2).uniform(size=(16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    half = np.full((12, 12), 0.5)
    assert ssim(half, half) == pytest.approx(1.0, abs=1e-12)
    binary = (np.random.default_rng(3).uniform(size=(20, 20)) > 0.5).astype(float)
    assert ssim(binary, 1.0 - binary) < 0.0


def test_ssim_small_images_fall_back_to_global():
    x = np.random.default_rng(4).uniform(size=(2, 8, 8))
    assert ssim_uses_global(x.shape) and not ssim_uses_global((28, 28))
    s = ssim_batch(x, x)
    np.testing.assert_allclose(s, 1.0)
    mx, my = x[0].mean(), x[1].mean()
    cov = ((x[0] - mx) * (x[1] - my)).mean()
    ref = ((2 * mx * my + 1e-4) * (2 * cov + 9e-4)) / ((mx**2 + my**2 + 1e-4) * (x[0].var() + x[1].var() + 9e-4))
    assert ssim(x[0], x[1]) == pytest.approx(ref)


def test_pca_orthonormal_and_eigenvalues():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(200, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
    comps, eigs = principal_components(rows)
    np.testing.assert_allclose(comps @ comps.T, np.eye(3), atol=1e-6)
    c = rows - rows.mean(0)
    ref = np.sort(np.linalg.eigvalsh(c.T @ c / len(rows)))[::-1][:3]
    np.testing.assert_allclose(eigs, ref, rtol=1e-6)


def test_latent_map_constant_when_one_entry():
    e = np.random.default_rng(6).normal(size=(10, 4))
    img = latent_map_rgb(np.full(9, 3), e, (3, 3))
    assert img.shape == (3, 3, 3)
    assert np.all(img == img[0, 0])


def test_latent_map_rank_one_codebook():
    t = np.linspace(-1, 1, 12)[:, None]
    e = t * np.array([[1.0, 2.0, -1.0, 0.5]])
    img = latent_map_rgb(np.arange(12) % 12, e, (3, 4))
    assert img[..., 0].min() == 0.0 and img[..., 0].max() == 1.0
    # the remaining channels carry only roundoff, flattened by the scaling guard
    assert np.ptp(img[..., 1]) == 0.0 and np.ptp(img[..., 2]) == 0.0
    comps, eigs = principal_components(e)
    assert eigs[0] > 0 and abs(eigs[1]) < 1e-10 * eigs[0]


def test_latent_map_shift_invariance():
    rng = np.random.default_rng(7)
    e = rng.normal(size=(16, 5))
    idx = rng.integers(0, 16, size=20)
    a = latent_map_rgb(idx, e, (4, 5))
    b = latent_map_rgb(idx, e + rng.normal(size=5) * 10, (4, 5))
    for c in range(3):
        assert np.allclose(a[..., c], b[..., c], atol=1e-6) or np.allclose(a[..., c], 1 - b[..., c], atol=1e-6)


def test_latent_map_pads_low_dim():
    e = np.random.default_rng(8).normal(size=(5, 2))
    img = latent_map_rgb(np.arange(4), e, (2, 2))
    assert not img[..., 2].any()


def test_latent_map_grid_mismatch():
    with pytest.raises(ShapeError):
        latent_map_rgb(np.arange(5), np.eye(5), (2, 2))
