"""Scene fitting, density control, the refine-and-densify loop and test-time pose alignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera_geom import EllipseTrajectory, sample_pose, trajectory_angles
from .core import CameraView, GaussianCloud, RgbdImage, inverse_sigmoid, quat_to_rotmat, rgb_to_sh_dc, rotation_angle
from .dataset import scene_extent
from .grad import backward
from .losses import LossWeights, gaussian_loss, l1_grad, sample_loss
from .refiners import RefinerError, build_request
from .render import RasterConfig, confidence_map, rasterize

log = logging.getLogger(__name__)

PARAM_GROUPS = ("positions", "log_scales", "rotations", "logit_opacities", "sh_coeffs")


@dataclass(frozen=True)
class OptimizerConfig:
    init_iters: int = 1000
    main_iters: int = 10000
    densify_interval: int = 100  # k: one refined novel view every k iterations
    # Adam, per parameter group
    lr_position: float = 1.6e-4  # times scene extent, decays exponentially
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    # density control
    adc_interval: int = 100
    densify_start: int = 500
    densify_stop: int | None = None  # None: half of main_iters
    densify_grad_threshold: float = 2e-4
    densify_scale_threshold: float = 0.01  # fraction of scene extent
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    max_splats: int = 200_000
    # poses
    optimize_poses: bool = True
    pose_lr: float = 1e-4
    pose_align_iters: int = 500
    align_lr: float = 2e-3
    align_lr_final: float = 2e-5
    # novel views
    n_angles: int = 60
    weights: LossWeights = field(default_factory=LossWeights)
    raster: RasterConfig = field(default_factory=RasterConfig)
    seed: int = 0

    def __post_init__(self):
        for k in ("init_iters", "main_iters", "densify_interval", "adc_interval", "opacity_reset_interval", "n_angles"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be > 0")
        if self.pose_align_iters < 0:
            raise ValueError("pose_align_iters must be >= 0")


# ---------------------------------------------------------------------------
# Adam over the cloud's parameter groups
# ---------------------------------------------------------------------------


def cloud_params(cloud: GaussianCloud) -> dict:
    return {k: getattr(cloud, k).copy() for k in PARAM_GROUPS}


def params_to_cloud(params: dict, sh_degree: int) -> GaussianCloud:
    return GaussianCloud(**params, sh_degree=sh_degree)


class Adam:
    """Element-wise Adam with separate moments per array; supports reindexing after ADC."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = lrs[k]
            if np.ndim(lr):  # per-column rates (sh dc vs rest)
                lr = np.asarray(lr)
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def remap(self, source: np.ndarray, fresh: np.ndarray) -> None:
        """Rows follow ``source``; rows flagged ``fresh`` restart with zero moments."""
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][source]
                d[k][fresh] = 0.0

    def reset(self, key: str) -> None:
        self.m[key][:] = 0.0
        self.v[key][:] = 0.0


def _exp_decay(start: float, end: float, it: int, total: int) -> float:
    frac = min(max(it / max(total, 1), 0.0), 1.0)
    return float(np.exp(np.log(start) * (1 - frac) + np.log(end) * frac))


def _lrs(cfg: OptimizerConfig, extent: float, it: int, total: int, sh_shape) -> dict:
    sh_lr = np.full(sh_shape[1:], cfg.lr_sh_rest)
    sh_lr[:, 0] = cfg.lr_sh_dc
    return {
        "positions": _exp_decay(cfg.lr_position, cfg.lr_position_final, it, total) * extent,
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "logit_opacities": cfg.lr_opacity,
        "sh_coeffs": sh_lr,
    }


def _normalize_rotations(params: dict) -> None:
    q = params["rotations"]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    params["rotations"] = q / np.where(n > 0, n, 1.0)


class PoseAdam:
    """Adam in the tangent space of one camera; the pose is re-centered every step."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-12):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.t = 0

    def step(self, cam: CameraView, grad: np.ndarray, lr: float) -> CameraView:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return cam.perturbed(-lr * mh / (np.sqrt(vh) + self.eps))


# ---------------------------------------------------------------------------
# training stack
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackEntry:
    camera: CameraView
    image: RgbdImage
    is_novel: bool


class TrainingStack:
    """Input views first, refined novel views appended after; nothing is ever removed."""

    def __init__(self, cams, images):
        cams, images = list(cams), list(images)
        if not cams or len(cams) != len(images):
            raise ValueError("need one image per camera and at least one view")
        self._entries = [StackEntry(c, i, False) for c, i in zip(cams, images)]
        self.n_input = len(cams)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i) -> StackEntry:
        return self._entries[i]

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    @property
    def input_cameras(self) -> list[CameraView]:
        return [e.camera for e in self._entries[: self.n_input]]

    @property
    def n_novel(self) -> int:
        return len(self._entries) - self.n_input

    def append_novel(self, cam: CameraView, image: RgbdImage) -> None:
        self._entries.append(StackEntry(cam, image, True))

    def with_cameras(self, cams) -> "TrainingStack":
        """Copy with the input cameras replaced (e.g. after joint pose refinement)."""
        s = TrainingStack(cams, [e.image for e in self._entries[: self.n_input]])
        s._entries.extend(self._entries[self.n_input:])
        return s


# ---------------------------------------------------------------------------
# adaptive density control
# ---------------------------------------------------------------------------


@dataclass
class DensityResult:
    cloud: GaussianCloud
    source: np.ndarray  # row i of the new cloud derives from row source[i] of the old one
    fresh: np.ndarray  # rows created this step
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def adaptive_density_control(
    cloud: GaussianCloud,
    grads,
    cfg: OptimizerConfig,
    extent: float = 1.0,
    rng: np.random.Generator | None = None,
) -> DensityResult:
    """Clone small / split large high-gradient splats, then prune transparent ones.

    ``grads.mean2d_norm`` must hold the per-splat averaged screen-space
    gradient norm over the accumulation window. Splits draw two samples from
    the parent Gaussian and shrink the scale by 1.6; the parent is removed.
    Only pre-existing splats are pruned, so a clone never vanishes in the
    step that created it.
    """
    rng = rng or np.random.default_rng(0)
    n = len(cloud)
    if n == 0:
        return DensityResult(cloud, np.zeros(0, int), np.zeros(0, bool))
    stat = np.asarray(grads.mean2d_norm, dtype=np.float64)
    selected = stat >= cfg.densify_grad_threshold
    room = cfg.max_splats - n
    if selected.sum() > max(room, 0):
        # keep the strongest candidates only
        order = np.argsort(-np.where(selected, stat, -np.inf), kind="stable")
        selected[:] = False
        selected[order[: max(room, 0)]] = True
    big = cloud.scales.max(axis=1) > cfg.densify_scale_threshold * extent
    clone = np.flatnonzero(selected & ~big)
    split = np.flatnonzero(selected & big)

    keep_old = np.ones(n, bool)
    keep_old[split] = False
    keep_old &= cloud.opacities >= cfg.prune_opacity
    old_idx = np.flatnonzero(keep_old)

    p = cloud_params(cloud)
    new_rows = []
    if len(split):
        s = cloud.scales[split]
        rot = quat_to_rotmat(cloud.rotations[split] / np.linalg.norm(cloud.rotations[split], axis=1, keepdims=True))
        for _ in range(2):
            sample = rng.normal(size=(len(split), 3)) * s
            rows = {k: v[split].copy() for k, v in p.items()}
            rows["positions"] = cloud.positions[split] + np.einsum("nij,nj->ni", rot, sample)
            rows["log_scales"] = cloud.log_scales[split] - np.log(1.6)
            new_rows.append((split, rows))
    if len(clone):
        new_rows.insert(0, (clone, {k: v[clone].copy() for k, v in p.items()}))

    parts = {k: [v[old_idx]] for k, v in p.items()}
    source = [old_idx]
    for src, rows in new_rows:
        for k in parts:
            parts[k].append(rows[k])
        source.append(src)
    out = {k: np.concatenate(v) for k, v in parts.items()}
    source = np.concatenate(source)
    fresh = np.zeros(len(source), bool)
    fresh[len(old_idx):] = True
    return DensityResult(
        params_to_cloud(out, cloud.sh_degree), source, fresh,
        n_cloned=len(clone), n_split=len(split), n_pruned=int(n - len(split) - len(old_idx)),
    )


class _DensityStats:
    def __init__(self, n):
        self.sum = np.zeros(n)
        self.count = np.zeros(n)

    def add(self, mean2d_norm, visible):
        self.sum += mean2d_norm
        self.count += visible

    def average(self):
        return self.sum / np.maximum(self.count, 1)

    def remap(self, source, fresh):
        self.sum = self.sum[source]
        self.count = self.count[source]
        self.sum[fresh] = 0.0
        self.count[fresh] = 0.0


class _GradView:
    def __init__(self, mean2d_norm):
        self.mean2d_norm = mean2d_norm


# ---------------------------------------------------------------------------
# scene fitting
# ---------------------------------------------------------------------------


def initial_cloud(points, colors=None, extent: float = 1.0) -> GaussianCloud:
    """One isotropic splat per point, scale = mean distance to the 3 nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    col = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = dist[:, 1:].mean(axis=1)
        nn = np.where(nn > 0, nn, max(nn.max(), 1e-3 * extent))
    else:
        nn = np.full(1, 0.01 * extent)
    log_s = np.repeat(np.log(np.maximum(nn, 1e-7))[:, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = rgb_to_sh_dc(np.clip(col, 0.0, 1.0))[:, :, None]
    return GaussianCloud(pts, rot, log_s, np.full(n, inverse_sigmoid(0.1)), sh, 0)


@dataclass
class FitResult:
    cloud: GaussianCloud
    cameras: list
    losses: list


def fit_scene(points, colors, cams, images, cfg: OptimizerConfig | None = None, iters: int | None = None, init: GaussianCloud | None = None) -> FitResult:
    """Initialize from the point cloud and optimize on the input views.

    Camera poses are refined jointly (except the first, which fixes the
    gauge) when ``cfg.optimize_poses``. No densification happens here.
    """
    cfg = cfg or OptimizerConfig()
    cams, images = list(cams), list(images)
    if not cams or len(cams) != len(images):
        raise ValueError("need at least one view and one image per camera")
    extent = scene_extent(cams, points)
    cloud = init if init is not None else initial_cloud(points, colors, extent)
    iters = cfg.init_iters if iters is None else iters
    rng = np.random.default_rng([cfg.seed, 1])
    params = cloud_params(cloud)
    adam = Adam(params, cfg.betas, cfg.adam_eps)
    pose_opt = [PoseAdam() for _ in cams]
    losses = []
    for it in range(iters):
        i = int(rng.integers(len(cams)))
        cloud = params_to_cloud(params, cloud.sh_degree)
        out = rasterize(cloud, cams[i], cfg.raster)
        loss, g = gaussian_loss(out, images[i])
        losses.append(loss)
        gc, gp = backward(cloud, cams[i], cfg.raster, g)
        adam.step(params, {k: getattr(gc, k) for k in PARAM_GROUPS}, _lrs(cfg, extent, it, iters, params["sh_coeffs"].shape))
        _normalize_rotations(params)
        if cfg.optimize_poses and i > 0:
            cams[i] = pose_opt[i].step(cams[i], gp.values, cfg.pose_lr)
    return FitResult(params_to_cloud(params, cloud.sh_degree), cams, losses)


# ---------------------------------------------------------------------------
# refine-and-densify loop
# ---------------------------------------------------------------------------


@dataclass
class ReconstructResult:
    cloud: GaussianCloud
    stack: TrainingStack
    losses: list
    refiner_calls: int
    refiner_failures: int
    novel_angles: list


def reconstruct(
    cloud: GaussianCloud,
    stack: TrainingStack,
    traj: EllipseTrajectory | None,
    refiner,
    cfg: OptimizerConfig | None = None,
    context=None,
    callback=None,
) -> ReconstructResult:
    """Main loop: every k-th iteration refine one novel view and add it to the stack.

    Each iteration renders one stack entry (the freshly refined view on
    refinement iterations, a uniformly drawn one otherwise), applies the
    3DGS loss to input views or the novel-view loss to synthesized ones, and
    takes one Adam step. Density control runs every ``adc_interval``
    iterations inside the densification window. ``callback(t, cloud)`` is
    invoked after each step when given.
    """
    cfg = cfg or OptimizerConfig()
    rng = np.random.default_rng([cfg.seed, 2])
    adc_rng = np.random.default_rng([cfg.seed, 3])
    extent = scene_extent(stack.input_cameras)
    params = cloud_params(cloud)
    degree = cloud.sh_degree
    adam = Adam(params, cfg.betas, cfg.adam_eps)
    stats = _DensityStats(len(cloud))
    angles = trajectory_angles(cfg.n_angles)
    reference = stack.input_cameras[0]
    stop = cfg.densify_stop if cfg.densify_stop is not None else cfg.main_iters // 2
    losses, used_angles = [], []
    calls = failures = 0
    next_angle = 0
    total = cfg.main_iters
    for t in range(1, total + 1):
        cloud = params_to_cloud(params, degree)
        entry = None
        if refiner is not None and traj is not None and t % cfg.densify_interval == 0:
            theta = float(angles[next_angle % len(angles)])
            next_angle += 1
            cam = sample_pose(traj, theta, reference)
            out = rasterize(cloud, cam, cfg.raster)
            confidence_map(out, cfg.raster)
            req = build_request(out, cam, stack.input_cameras, context, {"iteration": t, "theta": theta, "seed": cfg.seed})
            calls += 1
            try:
                resp = refiner(req).quantized()
            except (RefinerError, ValueError, OSError) as e:
                failures += 1
                log.warning("refiner failed at iteration %d (theta=%.3f): %s; view skipped", t, theta, e)
            else:
                stack.append_novel(cam, resp.refined)
                used_angles.append(theta)
                entry = stack[len(stack) - 1]
        if entry is None:
            entry = stack[int(rng.integers(len(stack)))]
        out = rasterize(cloud, entry.camera, cfg.raster)
        if entry.is_novel:
            loss, g = sample_loss(out, entry.image, cfg.weights, t)
        else:
            loss, g = gaussian_loss(out, entry.image)
        losses.append(loss)
        gc, _ = backward(cloud, entry.camera, cfg.raster, g)
        adam.step(params, {k: getattr(gc, k) for k in PARAM_GROUPS}, _lrs(cfg, extent, t, total, params["sh_coeffs"].shape))
        _normalize_rotations(params)
        stats.add(gc.mean2d_norm, gc.mean2d_norm > 0)

        if cfg.densify_start <= t <= stop and t % cfg.adc_interval == 0:
            res = adaptive_density_control(params_to_cloud(params, degree), _GradView(stats.average()), cfg, extent, adc_rng)
            params = cloud_params(res.cloud)
            adam.remap(res.source, res.fresh)
            stats = _DensityStats(len(res.cloud))
        if t % cfg.opacity_reset_interval == 0 and t < total:
            params["logit_opacities"] = np.minimum(params["logit_opacities"], inverse_sigmoid(0.01))
            adam.reset("logit_opacities")
        if callback is not None:
            callback(t, params_to_cloud(params, degree))
    return ReconstructResult(params_to_cloud(params, degree), stack, losses, calls, failures, used_angles)


# ---------------------------------------------------------------------------
# test-time pose alignment
# ---------------------------------------------------------------------------


@dataclass
class AlignResult:
    camera: CameraView
    loss: float
    losses: list


def align_test_pose(cloud: GaussianCloud, image: RgbdImage, init: CameraView, cfg: OptimizerConfig | None = None, iters: int | None = None) -> AlignResult:
    """Optimize the 6-DoF pose of ``init`` against ``image`` with the cloud frozen (L1 on RGB)."""
    cfg = cfg or OptimizerConfig()
    iters = cfg.pose_align_iters if iters is None else iters
    cam = init
    opt = PoseAdam()
    losses = []
    for it in range(iters):
        out = rasterize(cloud, cam, cfg.raster)
        loss, g_rgb = l1_grad(out.rgb, image.rgb)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite alignment loss")
        losses.append(loss)
        g = np.zeros(out.rgb.shape[:2] + (4,))
        g[..., :3] = g_rgb
        _, gp = backward(cloud, cam, cfg.raster, g)
        cam = opt.step(cam, gp.values, _exp_decay(cfg.align_lr, cfg.align_lr_final, it, iters))
    final = rasterize(cloud, cam, cfg.raster)
    loss = l1_grad(final.rgb, image.rgb)[0]
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite alignment loss")
    return AlignResult(cam, float(loss), losses)


def pose_error(a: CameraView, b: CameraView) -> tuple[float, float]:
    """(rotation geodesic in radians, camera-center distance)."""
    return rotation_angle(a.rotation, b.rotation), float(np.linalg.norm(a.center - b.center))
