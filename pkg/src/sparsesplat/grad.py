"""Reverse-mode gradients through compositing and EWA projection.

Upstream gradients are an (H, W, 4) array: dL/d rgb in channels 0..2 and
dL/d depth in channel 3. Gradients are exact for the piecewise-smooth forward
model; the alpha_min skip, the 0.99 alpha clamp, early termination, depth
ordering and color clamping are treated as constants, so their boundaries are
where finite differences and analytic gradients legitimately disagree.

Pose gradients use a left perturbation of the world-to-camera transform,
``p_cam -> exp(omega) p_cam + v``, ordered (omega, v).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .core import CameraView, GaussianCloud, quat_to_rotmat_jacobian, sh_basis_jacobian, skew
from .render import RasterConfig, Projection, _compact, bin_tiles, project_cloud, rasterize

_GENERATORS = np.stack([skew(e) for e in np.eye(3)])


@dataclass(eq=False)
class CloudGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    # |dL/d mean2d| in NDC units, the statistic used by densification
    mean2d_norm: np.ndarray

    GROUPS = ("positions", "log_scales", "rotations", "logit_opacities", "sh_coeffs")

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "CloudGradients":
        n = len(cloud)
        return cls(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
            np.zeros_like(cloud.sh_coeffs), np.zeros(n),
        )

    def __add__(self, other: "CloudGradients") -> "CloudGradients":
        return CloudGradients(*(getattr(self, k) + getattr(other, k) for k in self.GROUPS + ("mean2d_norm",)))


@dataclass(eq=False)
class PoseGradient:
    values: np.ndarray  # (omega_x, omega_y, omega_z, v_x, v_y, v_z)

    @property
    def rotation(self) -> np.ndarray:
        return self.values[:3]

    @property
    def translation(self) -> np.ndarray:
        return self.values[3:]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def _check_grads(pixel_loss_grads: np.ndarray, cam: CameraView) -> np.ndarray:
    g = np.asarray(pixel_loss_grads, dtype=np.float64)
    if g.shape != (cam.height, cam.width, 4):
        raise ValueError(f"pixel_loss_grads must have shape {(cam.height, cam.width, 4)}, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite upstream gradients")
    return g


def backward(
    cloud: GaussianCloud,
    cam: CameraView,
    cfg: RasterConfig | None,
    pixel_loss_grads: np.ndarray,
    proj: Projection | None = None,
) -> tuple[CloudGradients, PoseGradient]:
    """Gradients w.r.t. every splat attribute and the 6-DoF camera pose."""
    cfg = cfg or RasterConfig()
    g = _check_grads(pixel_loss_grads, cam)
    n = len(cloud)
    if proj is None:
        proj = project_cloud(cloud, cam, cfg)
    bins = bin_tiles(proj, cam, cfg.tile_size)
    order = bins.order
    means, conics, alpha_peak, colors, depths = _compact(proj, order)
    k = len(order)
    gm = np.zeros((k, 2))
    gcon = np.zeros((k, 3))
    gap = np.zeros(k)
    gcol = np.zeros((k, 3))
    gdep = np.zeros(k)
    if k:
        _kernels.composite_backward(
            cam.width, cam.height, cfg.tile_size, bins.tiles_x, bins.offsets, bins.ids,
            means, conics, alpha_peak, colors, depths,
            np.asarray(cfg.background, dtype=np.float64), cfg.alpha_min, cfg.t_terminate,
            np.ascontiguousarray(g[..., :3]), np.ascontiguousarray(g[..., 3]),
            gm, gcon, gap, gcol, gdep,
        )

    out = CloudGradients.zeros_like(cloud)
    pose = np.zeros(6)
    if k == 0:
        return out, PoseGradient(pose)

    # everything below works on the visible subset only
    R = cam.rotation
    p_cam = proj.p_cam[order]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    out.mean2d_norm[order] = np.hypot(gm[:, 0] * cam.width / 2.0, gm[:, 1] * cam.height / 2.0)

    # color -> SH coefficients and viewing direction
    g_raw = gcol * proj.color_active[order]
    sh = cloud.sh_coeffs[order]
    out.sh_coeffs[order] = g_raw[:, :, None] * proj.basis[order][:, None, :]
    g_pos = np.zeros((k, 3))
    g_center = np.zeros(3)
    if cloud.sh_degree > 0:
        dirs = proj.dirs[order]
        jac = sh_basis_jacobian(dirs, cloud.sh_degree)
        g_dir = np.einsum("nc,ncb,nbk->nk", g_raw, sh, jac)
        g_off = (g_dir - dirs * np.sum(g_dir * dirs, 1, keepdims=True)) / proj.dir_len[order][:, None]
        g_pos += g_off
        g_center -= g_off.sum(0)

    # opacity
    sig = 1.0 / (1.0 + np.exp(-cloud.logit_opacities[order]))
    out.logit_opacities[order] = gap * proj.opacity_active[order] * sig * (1.0 - sig)

    # conic -> 2D covariance
    a, b, c = conics[:, 0], conics[:, 1], conics[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GQ = np.stack([np.stack([gcon[:, 0], gcon[:, 1] / 2], -1), np.stack([gcon[:, 1] / 2, gcon[:, 2]], -1)], -2)
    G2 = -Q @ GQ @ Q

    # 2D covariance -> camera-frame covariance and projection Jacobian
    J = proj.jac[order]
    cov_cam = proj.cov_cam[order]
    Gc = J.transpose(0, 2, 1) @ G2 @ J
    GJ = 2.0 * G2 @ J @ cov_cam

    g_pc = np.zeros((k, 3))
    g_pc[:, 0] += gm[:, 0] * fx / z
    g_pc[:, 1] += gm[:, 1] * fy / z
    g_pc[:, 2] += -gm[:, 0] * fx * x / z**2 - gm[:, 1] * fy * y / z**2
    g_pc[:, 2] += gdep
    g_pc[:, 2] += GJ[:, 0, 0] * (-fx / z**2) + GJ[:, 1, 1] * (-fy / z**2)
    g_pc[:, 0] += GJ[:, 0, 2] * (-fx / z**2)
    g_pc[:, 1] += GJ[:, 1, 2] * (-fy / z**2)
    g_pc[:, 2] += GJ[:, 0, 2] * (2 * fx * x / z**3) + GJ[:, 1, 2] * (2 * fy * y / z**3)
    g_pos += g_pc @ R
    out.positions[order] = g_pos

    # camera-frame covariance -> world covariance -> scale and rotation
    G3 = R.T @ Gc @ R
    rot = proj.rotmats[order]
    s = proj.scales[order]
    M = rot * s[:, None, :]
    GM = 2.0 * G3 @ M
    g_s = np.einsum("nij,nij->nj", rot, GM)
    out.log_scales[order] = g_s * s
    GR = GM * s[:, None, :]
    q = proj.quats[order]
    g_q = np.einsum("nij,nijk->nk", GR, quat_to_rotmat_jacobian(q))
    qnorm = np.linalg.norm(cloud.rotations[order], axis=1, keepdims=True)
    out.rotations[order] = (g_q - q * np.sum(g_q * q, 1, keepdims=True)) / qnorm

    # pose: p_cam and cov_cam both move with the left perturbation
    N = cov_cam @ Gc
    g_omega = np.cross(p_cam, g_pc).sum(0)
    g_omega += 2.0 * np.einsum("nij,kji->k", N, _GENERATORS)
    g_v = g_pc.sum(0) - R @ g_center
    pose[:3] = g_omega
    pose[3:] = g_v
    return out, PoseGradient(pose)


def backward_cloud(cloud, cam, cfg, pixel_loss_grads) -> CloudGradients:
    return backward(cloud, cam, cfg, pixel_loss_grads)[0]


def backward_pose(cloud, cam, cfg, pixel_loss_grads) -> PoseGradient:
    return backward(cloud, cam, cfg, pixel_loss_grads)[1]


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def _linear_loss(cloud, cam, cfg, weights):
    r = rasterize(cloud, cam, cfg)
    val = float(np.sum(weights[..., :3] * r.rgb) + np.sum(weights[..., 3] * r.depth))
    proj = project_cloud(cloud, cam, cfg)
    sig = (
        r.composite_hash.tobytes(),
        (r.accum_alpha > _kernels.MIN_ACCUM).tobytes(),
        proj.visible.tobytes(),
        proj.color_active.tobytes(),
        proj.opacity_active.tobytes(),
    )
    return val, sig


def _with_param(cloud: GaussianCloud, group: str, idx: tuple, delta: float) -> GaussianCloud:
    arr = getattr(cloud, group).copy()
    arr[idx] += delta
    return replace(cloud, **{group: arr})


def _central_difference(f, base_sig, h, max_shrink):
    """Central difference that shrinks h while a probe changes the compositing structure.

    Returns (estimate, step used) or (None, h) when every step crosses a boundary.
    """
    for _ in range(max_shrink + 1):
        fp, sp = f(h)
        fm, sm = f(-h)
        if sp == base_sig and sm == base_sig:
            return (fp - fm) / (2 * h), h
        h /= 10.0
    return None, h


def relative_error(analytic, numeric, atol: float = 1e-6, rtol: float = 1e-3) -> np.ndarray:
    """|a - f| / max(|a|, |f|, atol/rtol): below rtol means within rtol or within atol."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), atol / rtol)


@dataclass
class GradcheckReport:
    max_rel_error: dict
    checked: dict
    skipped: dict
    pose_gradient: np.ndarray

    def passed(self, tol: float = 1e-3) -> bool:
        return all(v < tol for v in self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [
            f"{g:16s} max_rel_err={self.max_rel_error[g]:.3e} checked={self.checked[g]} skipped={self.skipped[g]}"
            for g in self.max_rel_error
        ]


def gradcheck(
    cloud: GaussianCloud,
    cam: CameraView,
    cfg: RasterConfig | None = None,
    seed: int = 0,
    h_cloud: float = 1e-4,
    h_pose: float = 1e-5,
    max_shrink: int = 3,
) -> GradcheckReport:
    """Compare analytic gradients with central differences for a random linear loss.

    The loss is ``sum(w * [rgb, depth])`` with w drawn from ``seed``. Probes
    whose +-h renders change the discrete compositing structure are retried
    with h/10 (up to ``max_shrink`` times) and otherwise counted as skipped.
    """
    cfg = cfg or RasterConfig()
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(cam.height, cam.width, 4))
    grads, pose = backward(cloud, cam, cfg, weights)
    _, base_sig = _linear_loss(cloud, cam, cfg, weights)

    errs, checked, skipped = {}, {}, {}
    for group in CloudGradients.GROUPS:
        analytic = getattr(grads, group)
        worst, n_ok, n_skip = 0.0, 0, 0
        for idx in np.ndindex(*analytic.shape):
            def f(d, group=group, idx=idx):
                return _linear_loss(_with_param(cloud, group, idx, d), cam, cfg, weights)

            num, _ = _central_difference(f, base_sig, h_cloud, max_shrink)
            if num is None:
                n_skip += 1
                continue
            worst = max(worst, float(relative_error(analytic[idx], num)))
            n_ok += 1
        if analytic.size:
            errs[group], checked[group], skipped[group] = worst, n_ok, n_skip

    if len(cloud):
        worst, n_ok, n_skip = 0.0, 0, 0
        for i in range(6):
            def f(d, i=i):
                xi = np.zeros(6)
                xi[i] = d
                return _linear_loss(cloud, cam.perturbed(xi), cfg, weights)

            num, _ = _central_difference(f, base_sig, h_pose, max_shrink)
            if num is None:
                n_skip += 1
                continue
            worst = max(worst, float(relative_error(pose.values[i], num)))
            n_ok += 1
        errs["pose"], checked["pose"], skipped["pose"] = worst, n_ok, n_skip
    return GradcheckReport(errs, checked, skipped, pose.values)
