import numpy as np
import pytest
from PIL import Image

from estn import ops, precision
from estn.attribution import AttributionMap, heatmap_image, lam, render_heatmap
from estn.network import ModelConfig, build_model
from estn.resample import gaussian_blur

from conftest import smooth_image


def test_identity_model_single_pixel(rng):
    lr = rng.random((3, 9, 8))
    amap = lam(lambda t: ops.mul(t, 1.0), lr, (4, 2, 1, 1), steps=3, sigma=1.5)
    expect = np.zeros((9, 8))
    expect[2, 4] = (lr - gaussian_blur(lr, 1.5))[:, 2, 4].sum()
    np.testing.assert_allclose(amap.values, expect, rtol=1e-6, atol=1e-7)
    assert amap.completeness_residual < 1e-5


def test_sigma_zero_is_zero():
    w = build_model(ModelConfig(channels=6, blocks=1, scale=2, bsgm_tile=8))
    amap = lam(w, smooth_image(8, 8), (0, 0, 4, 4), steps=5, sigma=0.0)
    assert not np.any(amap.values) and amap.completeness_residual == 0.0


def test_region_validation():
    w = build_model(ModelConfig(channels=6, blocks=1, scale=2, bsgm_tile=8))
    with pytest.raises(ValueError):
        lam(w, smooth_image(8, 8), (10, 10, 8, 8), steps=1)
    with pytest.raises(ValueError):
        lam(w, smooth_image(8, 8), (0, 0, 2, 2), steps=0)


def test_completeness_improves_with_steps():
    """Midpoint-rule error shrinks with M; averaged over 5 seeds in 64-bit."""
    res = {m: [] for m in (1, 3, 9)}
    with precision(np.float64):
        for seed in range(5):
            w = build_model(ModelConfig(channels=6, blocks=1, scale=2, bsgm_tile=8), seed=seed)
            for p in w.parameters():
                p.data = p.data.astype(np.float64)
            lr = np.random.default_rng(seed).random((3, 8, 8))
            for m in res:
                res[m].append(lam(w, lr, (2, 2, 6, 6), steps=m, sigma=2.0).completeness_residual)
    means = [np.mean(v) for v in res.values()]
    assert means[0] > means[1] > means[2]
    assert means[2] < 0.05


def _map(values):
    return AttributionMap(np.asarray(values, dtype=float), (0, 0, 1, 1), 1, 1.0, 0.0, 0.0)


def test_heatmap_rendering(tmp_path):
    assert not np.any(heatmap_image(_map(np.zeros((3, 4)))))
    v = np.zeros((3, 4))
    v[1, 2] = -0.3
    img = heatmap_image(_map(v))
    assert img[0, 1, 2] == 1.0 and img.sum() == 1.0
    rnd = np.random.default_rng(0).normal(size=(5, 6))
    img_path, csv_path = render_heatmap(_map(rnd), tmp_path / "a.png")
    render_heatmap(_map(rnd * 7.5), tmp_path / "b.png")
    assert np.array_equal(np.asarray(Image.open(img_path)), np.asarray(Image.open(tmp_path / "b.png")))
    np.testing.assert_allclose(np.loadtxt(csv_path, delimiter=","), rnd)
    with pytest.raises(ValueError):
        render_heatmap(_map(np.full((2, 2), np.nan)), tmp_path / "c.png")
