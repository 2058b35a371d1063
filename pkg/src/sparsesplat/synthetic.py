"""Synthetic scenes and camera rigs for tests, demos and desk-scale experiments."""
from __future__ import annotations

import zlib

import numpy as np

from .core import SH_C0, CameraView, GaussianCloud, inverse_sigmoid, rgb_to_sh_dc


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named phase, derived from one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def random_cloud(
    rng: np.random.Generator,
    n: int,
    center=(0.0, 0.0, 4.0),
    spread: float = 1.0,
    scale_range=(0.03, 0.15),
    opacity_range=(0.1, 0.9),
    sh_degree: int = 0,
    color_range=(0.1, 0.9),
    rest_scale: float = 0.05,
) -> GaussianCloud:
    """Random anisotropic Gaussians in a cube around ``center``.

    Colors stay inside ``color_range`` for every view direction as long as
    ``rest_scale`` is small, which keeps the color clamp inactive.
    """
    pos = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    log_scale = np.log(rng.uniform(*scale_range, (n, 3)))
    logit = inverse_sigmoid(rng.uniform(*opacity_range, n))
    b = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, b))
    sh[:, :, 0] = rgb_to_sh_dc(rng.uniform(*color_range, (n, 3)))
    if b > 1:
        sh[:, :, 1:] = rng.normal(scale=rest_scale, size=(n, 3, b - 1))
    return GaussianCloud(pos, rot, log_scale, logit, sh, sh_degree)


def default_camera(width: int = 64, height: int = 64, fov_deg: float = 60.0) -> CameraView:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(width, height, f, f, width / 2.0, height / 2.0)


def random_camera(rng: np.random.Generator, width=32, height=32, target=(0.0, 0.0, 4.0), dist=4.0, jitter=0.3) -> CameraView:
    """Camera near the origin side of ``target``, looking roughly at it."""
    target = np.asarray(target, dtype=np.float64)
    eye = target + np.array([0.0, 0.0, -dist]) + rng.uniform(-jitter, jitter, 3)
    aim = target + rng.uniform(-0.2, 0.2, 3)
    f = 0.5 * width / np.tan(np.radians(55) / 2)
    return CameraView.look_at(eye, aim, (0.0, -1.0, 0.0), width, height, f, f, width / 2.0 - 0.3, height / 2.0 + 0.2)


def ring_cameras(
    n: int,
    radius: float = 4.0,
    height: float = 0.0,
    target=(0.0, 0.0, 0.0),
    width: int = 48,
    img_height: int = 48,
    fov_deg: float = 50.0,
    phase: float = 0.0,
    angles=None,
    semi_b: float | None = None,
) -> list[CameraView]:
    """Cameras on a horizontal circle (or ellipse) in the y = height plane.

    World up is +y; every camera looks at ``target``.
    """
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    b = radius if semi_b is None else semi_b
    if angles is None:
        angles = phase + 2 * np.pi * np.arange(n) / n
    cams = []
    for th in angles:
        eye = np.array([radius * np.cos(th), height, b * np.sin(th)])
        cams.append(CameraView.look_at(eye, target, (0.0, 1.0, 0.0), width, img_height, f))
    return cams


def object_scene(rng: np.random.Generator, n: int = 2000, radius: float = 1.0, with_floor: bool = True) -> GaussianCloud:
    """A textured blob-sphere over a checkered floor, centered at the origin.

    Colors vary with azimuth and height so different sides of the object look
    different, which is what makes held-out views informative.
    """
    n_floor = n // 4 if with_floor else 0
    n_obj = n - n_floor
    d = rng.normal(size=(n_obj, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * (1.0 + 0.15 * np.sin(3 * np.arctan2(d[:, 2], d[:, 0])) * np.cos(2 * d[:, 1]))
    pos = d * r[:, None]
    az = np.arctan2(d[:, 2], d[:, 0])
    col = np.stack(
        [0.5 + 0.4 * np.cos(az), 0.5 + 0.4 * np.sin(2 * az + d[:, 1]), 0.5 + 0.4 * d[:, 1]], -1
    )
    scales = np.full((n_obj, 3), 0.09 * radius)
    scales[:, 0] *= rng.uniform(0.7, 1.3, n_obj)
    if n_floor:
        fp = np.stack([rng.uniform(-2.2, 2.2, n_floor), np.full(n_floor, -1.2 * radius), rng.uniform(-2.2, 2.2, n_floor)], -1)
        checker = ((np.floor(fp[:, 0] / 0.7) + np.floor(fp[:, 2] / 0.7)) % 2)[:, None]
        fcol = np.where(checker > 0, [0.85, 0.8, 0.7], [0.25, 0.3, 0.35])
        fscale = np.stack([np.full(n_floor, 0.16), np.full(n_floor, 0.02), np.full(n_floor, 0.16)], -1)
        pos = np.concatenate([pos, fp])
        col = np.concatenate([col, fcol])
        scales = np.concatenate([scales, fscale])
    m = len(pos)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (m, 1))
    sh = rgb_to_sh_dc(np.clip(col, 0.05, 0.95))[:, :, None]
    return GaussianCloud(pos, rot, np.log(scales), np.full(m, inverse_sigmoid(0.8)), sh, 0)


def cloud_colors(cloud: GaussianCloud) -> np.ndarray:
    """View-independent (DC) color of every splat."""
    return np.clip(0.5 + SH_C0 * cloud.sh_coeffs[:, :, 0], 0.0, 1.0)


def visible_points(cloud: GaussianCloud, cams, cfg=None, depth_tol: float = 0.15) -> np.ndarray:
    """Indices of splats whose center is seen (unoccluded) by at least one camera.

    A stand-in for a multi-view stereo point cloud: only surfaces the input
    views actually observe make it in.
    """
    from .render import rasterize

    seen = np.zeros(len(cloud), bool)
    for cam in cams:
        d = rasterize(cloud, cam, cfg).depth
        pc = cam.world_to_camera(cloud.positions)
        z = pc[:, 2]
        ok = z > 1e-3
        u = np.where(ok, cam.fx * pc[:, 0] / np.where(ok, z, 1) + cam.cx, -1)
        v = np.where(ok, cam.fy * pc[:, 1] / np.where(ok, z, 1) + cam.cy, -1)
        j, i = np.round(u).astype(int), np.round(v).astype(int)
        inside = ok & (j >= 0) & (j < cam.width) & (i >= 0) & (i < cam.height)
        ref = np.zeros(len(cloud))
        ref[inside] = d[i[inside], j[inside]]
        seen |= inside & (ref > 0) & (z <= ref + depth_tol)
    return np.flatnonzero(seen)


def sparse_view_scenario(seed: int, n: int = 2000, n_train: int = 3, n_points: int = 600, size: int = 48, noise: float = 0.01):
    """Dense reference scene, a few training cameras, held-out cameras between them,
    and a noisy point cloud restricted to what the training views see.

    Returns a dict with keys scene, train_cams, test_cams, points, colors.
    """
    rng = rng_stream(seed, "scenario")
    scene = object_scene(rng, n)
    phase = float(rng.uniform(0, 2 * np.pi))
    step = 2 * np.pi / n_train
    train = ring_cameras(n_train, radius=4.0, height=1.0, width=size, img_height=size, angles=phase + step * np.arange(n_train))
    test = ring_cameras(n_train, radius=4.0, height=1.0, width=size, img_height=size, angles=phase + step * (np.arange(n_train) + 0.5))
    idx = visible_points(scene, train)
    if len(idx) > n_points:
        idx = np.sort(rng.choice(idx, n_points, replace=False))
    pts = scene.positions[idx] + rng.normal(scale=noise, size=(len(idx), 3))
    cols = np.clip(cloud_colors(scene)[idx] + rng.normal(scale=0.02, size=(len(idx), 3)), 0, 1)
    return {"scene": scene, "train_cams": train, "test_cams": test, "points": pts, "colors": cols}
