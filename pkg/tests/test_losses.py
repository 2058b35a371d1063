import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsesplat.core import RenderOutput, RgbdImage
from sparsesplat.losses import (
    LinearSchedule, LossWeights, PccUndefined, gaussian_loss, pcc_loss, pcc_loss_grad, psnr, sample_loss, ssim,
    ssim_grad, tv_depth,
)


def _render(rgb, depth, accum=None):
    h, w = depth.shape
    acc = np.full((h, w), 0.9) if accum is None else accum
    return RenderOutput(rgb, depth, 1 - acc, np.ones((h, w), int), np.zeros((h, w)), acc)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_pcc_examples():
    a = np.random.default_rng(0).normal(size=(8, 8))
    a -= a.mean()
    assert pcc_loss(a, a) == pytest.approx(0, abs=1e-9)
    assert pcc_loss(a, 3 * a + 7) == pytest.approx(0, abs=1e-9)
    assert pcc_loss(a, -a) == pytest.approx(2, abs=1e-9)


finite = st.floats(-10, 10, allow_nan=False)


@given(arrays(float, (6, 6), elements=finite), arrays(float, (6, 6), elements=finite), st.floats(0.1, 10), st.floats(-5, 5))
def test_pcc_symmetry_and_affine_invariance(a, b, s, t):
    try:
        base = pcc_loss(a, b)
    except PccUndefined:
        return
    assert pcc_loss(b, a) == pytest.approx(base, abs=1e-9)
    assert pcc_loss(s * a + t, b) == pytest.approx(base, abs=1e-9)
    assert 0 <= base <= 2


def test_pcc_errors():
    with pytest.raises(PccUndefined):
        pcc_loss(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))
    with pytest.raises(PccUndefined):
        pcc_loss(np.arange(16.0).reshape(4, 4), np.arange(16.0).reshape(4, 4), np.eye(4, dtype=bool) & False)
    with pytest.raises(ValueError):
        pcc_loss(np.ones(3), np.ones(4))


def test_pcc_gradient_matches_fd():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(1, 3, (8, 8)), rng.uniform(1, 3, (8, 8))
    m = rng.uniform(size=(8, 8)) > 0.3
    _, g = pcc_loss_grad(a, b, m)
    assert _rel(g, _fd(lambda x: pcc_loss(x, b, m), a)) < 1e-4
    assert np.all(g[~m] == 0)


def test_schedules():
    w = LossWeights()
    assert w.w_d(0) == 1.0 and w.w_d(10000) == 0.01 and w.w_d(5000) == pytest.approx(0.505)
    assert w.w_sample(0) == 1.0 and w.w_sample(10000) == pytest.approx(0.1)
    assert w.w_d(20000) == 0.01
    with pytest.raises(ValueError):
        LinearSchedule(1, 0, 0)


def test_sample_loss_zero_when_equal_and_shape_checked():
    rng = np.random.default_rng(2)
    rgb, depth = rng.uniform(size=(8, 8, 3)), rng.uniform(1, 2, (8, 8))
    v, g = sample_loss(_render(rgb, depth), RgbdImage(rgb, depth), LossWeights(), 0)
    assert v == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        sample_loss(_render(rgb, depth), RgbdImage(rgb[:4], depth[:4]), LossWeights(), 0)


def test_sample_loss_gradients_match_fd():
    rng = np.random.default_rng(3)
    rgb, depth = rng.uniform(size=(8, 8, 3)), rng.uniform(1, 2, (8, 8))
    ref = RgbdImage(rng.uniform(size=(8, 8, 3)), rng.uniform(1, 2, (8, 8)))
    acc = np.where(rng.uniform(size=(8, 8)) > 0.2, 0.9, 0.0)
    w = LossWeights()
    _, g = sample_loss(_render(rgb, depth, acc), ref, w, 2500)
    num_rgb = _fd(lambda x: sample_loss(_render(x, depth, acc), ref, w, 2500)[0], rgb)
    num_d = _fd(lambda x: sample_loss(_render(rgb, x, acc), ref, w, 2500)[0], depth)
    assert _rel(g[..., :3], num_rgb) < 1e-4
    assert _rel(g[..., 3], num_d) < 1e-4


def test_sample_loss_depth_fallback_to_l1():
    rgb = np.full((8, 8, 3), 0.5)
    flat = np.full((8, 8), 2.0)
    ref = RgbdImage(rgb, np.full((8, 8), 3.0))
    v, g = sample_loss(_render(rgb, flat), ref, LossWeights(), 0)
    assert v == pytest.approx(1.0)  # w_d(0) * mean |2 - 3|
    assert np.allclose(g[..., 3], -1 / 64)


def test_gaussian_loss_examples():
    rgb = np.full((16, 16, 3), 0.4)
    v, _ = gaussian_loss(_render(rgb, np.ones((16, 16))), RgbdImage(rgb, np.ones((16, 16))))
    assert v == pytest.approx(0, abs=1e-12)
    v, _ = gaussian_loss(_render(rgb + 0.1, np.ones((16, 16))), RgbdImage(rgb, np.ones((16, 16))))
    s = ssim(rgb + 0.1, rgb)
    assert v == pytest.approx(0.08 + 0.2 * (1 - s))
    assert ssim(rgb, rgb) == pytest.approx(1.0)


def test_gaussian_loss_gradient_matches_fd():
    rng = np.random.default_rng(4)
    rgb, tgt = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    d = np.ones((8, 8))
    _, g = gaussian_loss(_render(rgb, d), RgbdImage(tgt, d))
    num = _fd(lambda x: gaussian_loss(_render(x, d), RgbdImage(tgt, d))[0], rgb)
    assert _rel(g[..., :3], num) < 1e-4
    assert np.all(g[..., 3] == 0)


def test_ssim_gradient_matches_fd():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(9, 7, 3)), rng.uniform(size=(9, 7, 3))
    _, g = ssim_grad(a, b)
    assert _rel(g, _fd(lambda x: ssim(x, b), a)) < 1e-5


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == 99.0
    assert psnr(a, np.ones_like(a)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 3, 3)))


def test_tv_depth_examples():
    assert tv_depth(np.full((8, 8), 3.0)) == 0
    d = np.zeros((8, 8))
    d[:, 4:] = 1.0
    assert tv_depth(d) == pytest.approx(8 / (8 * 7 + 7 * 8))
    rng = np.random.default_rng(6).uniform(size=(8, 8))
    assert tv_depth(2.5 * rng) == pytest.approx(2.5 * tv_depth(rng))
    with pytest.raises(ValueError):
        tv_depth(np.zeros((1, 5)))
