"""Training losses and image metrics.

Every loss that drives optimization returns ``(value, grads)`` where
``grads`` is an (H, W, 4) array of d loss / d [r, g, b, depth], ready for
:func:`sparsesplat.grad.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import RenderOutput, RgbdImage

MIN_ACCUM = 1e-6
SSIM_LAMBDA = 0.2
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


class PccUndefined(ValueError):
    """Too few masked pixels, or zero variance in one of the inputs."""


@dataclass(frozen=True)
class LinearSchedule:
    start: float
    end: float
    horizon: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.start < 0 or self.end < 0:
            raise ValueError("weights must be >= 0")

    def __call__(self, it: int) -> float:
        if it >= self.horizon:
            return float(self.end)
        frac = max(it, 0) / self.horizon
        return float(self.start + (self.end - self.start) * frac)


@dataclass(frozen=True)
class LossWeights:
    w_sample: LinearSchedule = field(default_factory=lambda: LinearSchedule(1.0, 0.1, 10000))
    w_d: LinearSchedule = field(default_factory=lambda: LinearSchedule(1.0, 0.01, 10000))
    # perceptual term needs a pretrained network; kept as a zero-weight slot
    w_perceptual: float = 0.0


def perceptual_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Placeholder for a learned perceptual distance. Contributes nothing."""
    return 0.0, np.zeros_like(np.asarray(a, dtype=np.float64))


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# PCC
# ---------------------------------------------------------------------------


def _pcc_parts(a, b, mask):
    a, b = _check_same(a, b)
    mask = np.ones(a.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != a.shape:
        raise ValueError("mask shape mismatch")
    if mask.sum() < 2:
        raise PccUndefined("need at least 2 masked pixels")
    da = a[mask] - a[mask].mean()
    db = b[mask] - b[mask].mean()
    sa, sb = da @ da, db @ db
    scale = max(np.abs(a[mask]).max(), np.abs(b[mask]).max(), 1.0)
    if sa <= 1e-24 * scale**2 * len(da) or sb <= 1e-24 * scale**2 * len(db):
        raise PccUndefined("zero variance")
    r = (da @ db) / np.sqrt(sa * sb)
    return mask, da, db, sa, sb, float(np.clip(r, -1.0, 1.0))


def pcc_loss(a, b, mask=None) -> float:
    """1 minus the Pearson correlation of ``a`` and ``b`` over ``mask``; in [0, 2]."""
    return 1.0 - _pcc_parts(a, b, mask)[-1]


def pcc_loss_grad(a, b, mask=None) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``a`` (zero outside the mask)."""
    mask, da, db, sa, sb, r = _pcc_parts(a, b, mask)
    g = np.zeros(np.shape(a))
    g[mask] = -(db / np.sqrt(sa * sb) - r * da / sa)
    return 1.0 - r, g


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = _gauss_window()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding + symmetric kernel, so this operator is its own adjoint
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    mxx, myy, mxy = _blur(x * x), _blur(y * y), _blur(x * y)
    sxx, syy, sxy = mxx - mx**2, myy - my**2, mxy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx**2 + my**2 + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean SSIM (11-tap Gaussian window, sigma 1.5) over all pixels and channels."""
    a, b = _check_same(a, b)
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM value and d SSIM / d a."""
    x, y = _check_same(a, b)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    inv = 1.0 / (x.size * b1 * b2)
    # partials of the mean w.r.t. the local moments of x
    g_mx = (2 * my * (a2 - a1)) * inv - 2 * mx * s * (1 / b1 - 1 / b2) / x.size
    g_mxx = -s / b2 / x.size
    g_mxy = 2 * a1 * inv
    grad = _blur(g_mx) + 2 * x * _blur(g_mxx) + y * _blur(g_mxy)
    return float(np.mean(s)), grad


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------


def l1_grad(a, b) -> tuple[float, np.ndarray]:
    a, b = _check_same(a, b)
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def gaussian_loss(render: RenderOutput, target: RgbdImage, lam: float = SSIM_LAMBDA) -> tuple[float, np.ndarray]:
    """(1 - lam) * L1 + lam * (1 - SSIM) on RGB. Depth receives no gradient."""
    l1, g1 = l1_grad(render.rgb, target.rgb)
    s, gs = ssim_grad(render.rgb, target.rgb)
    grads = np.zeros(render.rgb.shape[:2] + (4,))
    grads[..., :3] = (1 - lam) * g1 - lam * gs
    return (1 - lam) * l1 + lam * (1 - s), grads


def depth_mask(render: RenderOutput, refined: RgbdImage) -> np.ndarray:
    return (render.accum_alpha > MIN_ACCUM) & (refined.depth > 0)


def sample_loss(render: RenderOutput, refined: RgbdImage, weights: LossWeights, it: int) -> tuple[float, np.ndarray]:
    """Novel-view objective: w_sample(t) * L1(rgb) + w_d(t) * PCC(depth).

    PCC uses pixels where both the render and the refined depth are defined.
    If the correlation is undefined there (too few pixels or flat depth) the
    depth term falls back to masked L1.
    """
    if render.rgb.shape != refined.rgb.shape:
        raise ValueError(f"shape mismatch: {render.rgb.shape} vs {refined.rgb.shape}")
    ws, wd = weights.w_sample(it), weights.w_d(it)
    grads = np.zeros(render.rgb.shape[:2] + (4,))
    l1, g1 = l1_grad(render.rgb, refined.rgb)
    value = ws * l1
    grads[..., :3] = ws * g1
    if weights.w_perceptual:
        lp, gp = perceptual_loss(render.rgb, refined.rgb)
        value += weights.w_perceptual * lp
        grads[..., :3] += weights.w_perceptual * gp
    if wd > 0:
        mask = depth_mask(render, refined)
        try:
            lp, gp = pcc_loss_grad(render.depth, refined.depth, mask)
        except PccUndefined:
            n = int(mask.sum())
            if n:
                d = np.where(mask, render.depth - refined.depth, 0.0)
                lp, gp = float(np.abs(d).sum() / n), np.sign(d) / n
            else:
                lp, gp = 0.0, np.zeros_like(render.depth)
        value += wd * lp
        grads[..., 3] = wd * gp
    return float(value), grads


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(a, b) -> float:
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def tv_depth(depth) -> float:
    """Mean absolute forward difference over all horizontal and vertical pairs."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or min(d.shape) < 2:
        raise ValueError("depth must be at least 2x2")
    dx = np.abs(np.diff(d, axis=1))
    dy = np.abs(np.diff(d, axis=0))
    return float((dx.sum() + dy.sum()) / (dx.size + dy.size))
