"""EWA projection and tile-based front-to-back compositing.

Besides color and depth, every render carries final transmittance, the number
of contributing Gaussians per pixel and the confidence map
``-log(T + eps) * n_contrib``, which is 0 on empty pixels and grows with both
opacity coverage and the number of primitives agreeing on a pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (
    CameraView,
    GaussianCloud,
    GaussianSplat,
    RenderOutput,
    activate_opacity,
    quat_to_rotmat,
    sh_basis,
)

LOW_PASS = 0.3
MIN_DET = 1e-12
MIN_ACCUM = _kernels.MIN_ACCUM
ALPHA_CLAMP = _kernels.ALPHA_CLAMP


@dataclass(frozen=True)
class RasterConfig:
    epsilon: float = 1e-6
    alpha_min: float = 1.0 / 255.0
    t_terminate: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)
    near_plane: float = 0.01
    tile_size: int = 16
    naive: bool = False  # route through the per-pixel oracle instead of tiles

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.alpha_min < 1:
            raise ValueError("alpha_min must be in (0, 1)")
        if not 0 <= self.t_terminate < 1:
            raise ValueError("t_terminate must be in [0, 1)")
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_peak: float


@dataclass(eq=False)
class Projection:
    """Screen-space quantities for a whole cloud, plus what the backward pass reuses.

    Arrays are full length; ``visible`` marks splats that reach the compositor.
    """

    visible: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    alpha_peak: np.ndarray
    extents: np.ndarray
    # intermediates
    p_cam: np.ndarray = field(repr=False, default=None)
    jac: np.ndarray = field(repr=False, default=None)
    cov_cam: np.ndarray = field(repr=False, default=None)
    cov3d: np.ndarray = field(repr=False, default=None)
    rotmats: np.ndarray = field(repr=False, default=None)
    quats: np.ndarray = field(repr=False, default=None)
    scales: np.ndarray = field(repr=False, default=None)
    dirs: np.ndarray = field(repr=False, default=None)
    dir_len: np.ndarray = field(repr=False, default=None)
    basis: np.ndarray = field(repr=False, default=None)
    color_active: np.ndarray = field(repr=False, default=None)
    opacity_active: np.ndarray = field(repr=False, default=None)


def project_cloud(cloud: GaussianCloud, cam: CameraView, cfg: RasterConfig | None = None) -> Projection:
    cfg = cfg or RasterConfig()
    n = len(cloud)
    R, t = cam.rotation, cam.translation
    p_cam = cloud.positions @ R.T + t
    z = p_cam[:, 2]
    front = z > cfg.near_plane
    zs = np.where(front, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]

    qnorm = np.linalg.norm(cloud.rotations, axis=1, keepdims=True) if n else np.ones((0, 1))
    quats = cloud.rotations / qnorm
    rotmats = quat_to_rotmat(quats)
    scales = np.exp(cloud.log_scales)
    m = rotmats * scales[:, None, :]
    cov3d = m @ m.transpose(0, 2, 1)
    cov_cam = R @ cov3d @ R.T

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    cov2d = jac @ cov_cam @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok_det = det > MIN_DET
    dsafe = np.where(ok_det, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / dsafe, -cov2d[:, 0, 1] / dsafe, cov2d[:, 0, 0] / dsafe], -1)

    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)

    raw_opacity = activate_opacity(cloud.logit_opacities).reshape(n) if n else np.zeros(0)
    opacity_active = raw_opacity < ALPHA_CLAMP
    alpha_peak = np.minimum(raw_opacity, ALPHA_CLAMP)

    offset = cloud.positions - cam.center
    dir_len = np.linalg.norm(offset, axis=1)
    dirs = offset / np.where(dir_len > 0, dir_len, 1.0)[:, None]
    basis = sh_basis(dirs, cloud.sh_degree) if n else np.zeros((0, cloud.sh_coeffs.shape[2]))
    raw_color = 0.5 + np.einsum("ncb,nb->nc", cloud.sh_coeffs, basis)
    color_active = (raw_color > 0.0) & (raw_color < 1.0)
    colors = np.clip(raw_color, 0.0, 1.0)

    # pixels with alpha >= alpha_min satisfy d^T conic d <= rho2
    ratio = np.where(alpha_peak > cfg.alpha_min, alpha_peak / cfg.alpha_min, 1.0)
    rho2 = 2.0 * np.log(ratio)
    extents = np.sqrt(rho2[:, None] * np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], -1)) + 1e-6
    lo = np.ceil(means2d - extents)
    hi = np.floor(means2d + extents)
    on_image = (
        (hi[:, 0] >= 0) & (lo[:, 0] <= cam.width - 1) & (hi[:, 1] >= 0) & (lo[:, 1] <= cam.height - 1) & (lo <= hi).all(1)
    )
    visible = front & ok_det & (alpha_peak > cfg.alpha_min) & on_image & (dir_len > 0)

    return Projection(
        visible, means2d, cov2d, conics, z.copy(), colors, alpha_peak, extents,
        p_cam, jac, cov_cam, cov3d, rotmats, quats, scales, dirs, dir_len, basis,
        color_active, opacity_active,
    )


def project_gaussian(splat: GaussianSplat, cam: CameraView, cfg: RasterConfig | None = None) -> ProjectedGaussian | None:
    """Project one splat; returns None when it is culled."""
    sh = np.asarray(splat.sh_coeffs).reshape(3, -1)
    cloud = GaussianCloud(
        splat.position[None], splat.rotation[None], splat.log_scale[None],
        np.array([splat.logit_opacity]), sh[None], 0 if sh.shape[1] == 1 else 3,
    )
    proj = project_cloud(cloud, cam, cfg)
    if not proj.visible[0]:
        return None
    return ProjectedGaussian(
        proj.means2d[0], proj.cov2d[0], float(proj.depths[0]), proj.colors[0], float(proj.alpha_peak[0])
    )


@dataclass(eq=False)
class TileBins:
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray
    ids: np.ndarray  # indices into the compacted visible arrays
    order: np.ndarray  # compacted index -> cloud index


def bin_tiles(proj: Projection, cam: CameraView, tile_size: int) -> TileBins:
    tiles_x = -(-cam.width // tile_size)
    tiles_y = -(-cam.height // tile_size)
    vis = np.flatnonzero(proj.visible)
    # stable depth sort; ties keep cloud order
    order = vis[np.argsort(proj.depths[vis], kind="stable")]
    lo = np.ceil(proj.means2d[order] - proj.extents[order])
    hi = np.floor(proj.means2d[order] + proj.extents[order])
    tx0 = np.clip(lo[:, 0], 0, cam.width - 1).astype(np.int64) // tile_size
    tx1 = np.clip(hi[:, 0], 0, cam.width - 1).astype(np.int64) // tile_size
    ty0 = np.clip(lo[:, 1], 0, cam.height - 1).astype(np.int64) // tile_size
    ty1 = np.clip(hi[:, 1], 0, cam.height - 1).astype(np.int64) // tile_size
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    lx = local % np.repeat(nx, counts)
    ly = local // np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + ly) * tiles_x + np.repeat(tx0, counts) + lx
    # rank already encodes depth order, so sorting by (tile, rank) is enough
    key = np.argsort(tile * max(len(order), 1) + rank, kind="stable")
    ids = rank[key].astype(np.int64)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=offsets[1:])
    return TileBins(tiles_x, tiles_y, offsets, ids, order)


def _compact(proj: Projection, order: np.ndarray):
    return (
        np.ascontiguousarray(proj.means2d[order]),
        np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(proj.alpha_peak[order]),
        np.ascontiguousarray(proj.colors[order]),
        np.ascontiguousarray(proj.depths[order]),
    )


def _inv_area(cov2d: np.ndarray) -> np.ndarray:
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    return 1.0 / (np.pi * np.sqrt(det))


def confidence_from(transmittance, n_contrib, epsilon: float) -> np.ndarray:
    return -np.log(np.asarray(transmittance) + epsilon) * np.asarray(n_contrib)


def rasterize(cloud: GaussianCloud, cam: CameraView, cfg: RasterConfig | None = None, proj: Projection | None = None) -> RenderOutput:
    """Render color, depth, transmittance, contributor counts and confidence."""
    cfg = cfg or RasterConfig()
    if cfg.naive:
        return rasterize_naive(cloud, cam, cfg)
    if proj is None:
        proj = project_cloud(cloud, cam, cfg)
    bins = bin_tiles(proj, cam, cfg.tile_size)
    means, conics, alpha_peak, colors, depths = _compact(proj, bins.order)
    inv_area = np.ascontiguousarray(_inv_area(proj.cov2d[bins.order]))
    h, w = cam.height, cam.width
    rgb = np.empty((h, w, 3))
    depth = np.empty((h, w))
    T = np.empty((h, w))
    n = np.empty((h, w), dtype=np.int64)
    inv_area_acc = np.empty((h, w))
    comp_hash = np.empty((h, w), dtype=np.int64)
    _kernels.composite_forward(
        w, h, cfg.tile_size, bins.tiles_x, bins.offsets, bins.ids,
        means, conics, alpha_peak, colors, depths, inv_area,
        np.asarray(cfg.background, dtype=np.float64), cfg.alpha_min, cfg.t_terminate,
        rgb, depth, T, n, inv_area_acc, comp_hash,
    )
    out = RenderOutput(rgb, depth, T, n, confidence_from(T, n, cfg.epsilon), 1.0 - T)
    out.footprint_weight = inv_area_acc
    out.composite_hash = comp_hash
    return out


def rasterize_naive(cloud: GaussianCloud, cam: CameraView, cfg: RasterConfig | None = None) -> RenderOutput:
    """Reference compositor: every visible Gaussian against every pixel, no tiles.

    Used as the oracle for the tiled kernel; slow for large clouds.
    """
    cfg = cfg or RasterConfig()
    proj = project_cloud(cloud, cam, cfg)
    h, w = cam.height, cam.width
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    T = np.ones((h, w))
    rgb = np.zeros((h, w, 3))
    dacc = np.zeros((h, w))
    inv_area_acc = np.zeros((h, w))
    n = np.zeros((h, w), dtype=np.int64)
    front = np.flatnonzero(proj.depths > cfg.near_plane)
    order = front[np.argsort(proj.depths[front], kind="stable")]
    for i in order:
        det = proj.cov2d[i, 0, 0] * proj.cov2d[i, 1, 1] - proj.cov2d[i, 0, 1] ** 2
        if det <= MIN_DET:
            continue
        a, b, c = proj.conics[i]
        dx = px - proj.means2d[i, 0]
        dy = py - proj.means2d[i, 1]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(ALPHA_CLAMP, proj.alpha_peak[i] * np.exp(power))
        use = (alpha >= cfg.alpha_min) & (T >= cfg.t_terminate)
        wgt = np.where(use, alpha * T, 0.0)
        rgb += wgt[..., None] * proj.colors[i]
        dacc += wgt * proj.depths[i]
        inv_area_acc += wgt / (np.pi * np.sqrt(det))
        T = np.where(use, T * (1.0 - alpha), T)
        n += use
    rgb += T[..., None] * np.asarray(cfg.background, dtype=np.float64)
    acc = 1.0 - T
    depth = np.where(acc > MIN_ACCUM, dacc / np.where(acc > MIN_ACCUM, acc, 1.0), 0.0)
    out = RenderOutput(rgb, depth, T, n, confidence_from(T, n, cfg.epsilon), acc)
    out.footprint_weight = inv_area_acc
    return out


def confidence_map(render: RenderOutput, cfg: RasterConfig | None = None) -> np.ndarray:
    """Per-pixel ``-log(T + eps) * n_contrib``; also stored on ``render.confidence``."""
    cfg = cfg or RasterConfig()
    conf = confidence_from(render.transmittance, render.n_contrib, cfg.epsilon)
    render.confidence = conf
    return conf


def enhancer_confidence(render: RenderOutput, cloud: GaussianCloud, cam: CameraView, cfg: RasterConfig | None = None) -> np.ndarray:
    """Small-footprint heuristic used as an ablation baseline.

    Score is the blend-weighted mean of 1 / (pi * sqrt(det cov2d)) over the
    pixel's contributors, so pixels covered by small splats score high and
    empty pixels score 0.
    """
    weight = getattr(render, "footprint_weight", None)
    if weight is None:
        weight = rasterize(cloud, cam, cfg).footprint_weight
    acc = render.accum_alpha
    ok = (render.n_contrib > 0) & (acc > 0)
    return np.where(ok, weight / np.where(ok, acc, 1.0), 0.0)


def normalize_confidence_for_display(conf: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    p99 = float(np.percentile(conf, 99)) if conf.size else 0.0
    scale = p99 if p99 > 0 else 1.0
    return np.clip(conf / scale, 0.0, 1.0)
