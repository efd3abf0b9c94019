import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from estn.metrics import PEAK, psnr, rgb_to_y, ssim


def test_rgb_to_y_examples(rng):
    assert rgb_to_y(np.full((3, 1, 1), 255.0))[0, 0] == pytest.approx(255.0, abs=1e-12)
    assert rgb_to_y(np.zeros((3, 2, 2))).max() == 0
    assert rgb_to_y(np.full((3, 1, 1), 77.0))[0, 0] == pytest.approx(77.0, abs=1e-12)
    x = rng.uniform(0, 100, (3, 4, 4))
    np.testing.assert_allclose(rgb_to_y(2.5 * x), 2.5 * rgb_to_y(x), rtol=1e-12)


def test_psnr_closed_forms(rng):
    assert psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 4))) == math.inf
    assert psnr(np.full((3, 4, 4), 255.0), np.zeros((3, 4, 4))) == pytest.approx(0.0, abs=1e-3)
    hr = rng.integers(0, 254, (3, 8, 8)).astype(float)
    assert psnr(hr + 1, hr) == pytest.approx(20 * math.log10(255), abs=1e-3)
    assert 20 * math.log10(255) == pytest.approx(48.13, abs=5e-3)
    with pytest.raises(ValueError):
        psnr(hr, hr[:, :4])


def test_psnr_border_and_monotone(rng):
    hr = rng.uniform(20, 230, (3, 16, 16))
    sr = hr.copy()
    sr[:, 0, :] += 15  # damage confined to the border
    assert psnr(sr, hr, border=1) == math.inf
    noise = rng.choice([-1.0, 1.0], size=hr.shape)
    vals = [psnr(hr + a * noise, hr) for a in (1, 2, 5, 10)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_constants(rng):
    x = rng.uniform(0, 255, (3, 20, 20))
    assert ssim(x, x) == 1.0 and ssim(x, x, mode="global") == 1.0
    c = np.full((3, 20, 20), 90.0)
    assert ssim(c, c) == 1.0 and ssim(c, c, mode="global") == 1.0
    with pytest.raises(ValueError):
        ssim(x, x, mode="local")


def test_ssim_global_offset_closed_form(rng):
    hr = rng.uniform(0, 200, (3, 12, 12))
    c = 20.0
    y = rgb_to_y(hr)
    mu = y.mean()
    a1 = (0.01 * PEAK) ** 2
    expect = (2 * mu * (mu + c) + a1) / (mu ** 2 + (mu + c) ** 2 + a1)
    assert ssim(hr + c, hr, mode="global") == pytest.approx(expect, rel=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=15)
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    x, y = r.uniform(0, 255, (2, 3, 16, 13))
    assert ssim(x, y) == ssim(y, x)
    assert ssim(x, y, mode="global") == ssim(y, x, mode="global")


def test_windowed_ssim_matches_skimage(rng):
    x = rng.uniform(0, 255, (3, 30, 27))
    y = np.clip(x + rng.normal(0, 20, x.shape), 0, 255)
    ref = structural_similarity(rgb_to_y(x), rgb_to_y(y), gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=255)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-10)


def test_small_images_fall_back_to_global(rng):
    x, y = rng.uniform(0, 255, (2, 3, 8, 8))
    assert ssim(x, y) == ssim(x, y, mode="global")
