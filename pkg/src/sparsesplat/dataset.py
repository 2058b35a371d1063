"""Clean/artifact training pairs for a conditioned RGBD refiner.

A *dense* cloud plays the high-quality model and a *sparse* cloud the
low-quality one. For each target camera we render the clean image from the
dense cloud, the artifact image and its confidence from the sparse cloud, and
attach the camera conditioning tensors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from . import io
from .camera_geom import camera_embeddings
from .core import CameraView, GaussianCloud, RgbdImage, so3_exp
from .render import RasterConfig, confidence_map, rasterize

log = logging.getLogger(__name__)

LATENT_FACTOR = 8
CONTEXT_DIM = 768
USUAL_M = (3, 6, 9, 18)


def downsample_confidence(conf, factor: int = LATENT_FACTOR) -> np.ndarray:
    """Average-pool by ``factor`` x ``factor``; ragged edges are padded by replication."""
    c = np.asarray(conf, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < factor or c.shape[1] < factor:
        raise ValueError(f"confidence map must be at least {factor}x{factor}, got {c.shape}")
    h, w = c.shape
    oh, ow = -(-h // factor), -(-w // factor)
    c = np.pad(c, ((0, oh * factor - h), (0, ow * factor - w)), mode="edge")
    return c.reshape(oh, factor, ow, factor).mean(axis=(1, 3))


def scene_extent(cams, points=None) -> float:
    """Radius of the camera rig (times 1.1), or of the points when the rig is degenerate."""
    centers = np.stack([c.center for c in cams])
    r = np.linalg.norm(centers - centers.mean(0), axis=1).max() * 1.1
    if r < 1e-9 and points is not None and len(points):
        p = np.asarray(points).reshape(-1, 3)
        r = np.linalg.norm(p - p.mean(0), axis=1).max() * 1.1
    return float(r) if r > 1e-9 else 1.0


def perturb_camera(cam: CameraView, rot_deg: float, trans_frac: float, seed: int, extent: float = 1.0) -> CameraView:
    """Rotate about the camera center by exactly ``rot_deg`` around a random axis,
    then move the center by ``trans_frac * extent`` in a random direction."""
    if rot_deg < 0 or trans_frac < 0:
        raise ValueError("perturbation magnitudes must be >= 0")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift /= np.linalg.norm(shift)
    r_axis = so3_exp(axis * np.radians(rot_deg))
    r_new = cam.rotation @ r_axis.T
    center = cam.center + trans_frac * extent * shift
    return cam.with_pose(r_new, -r_new @ center)


def interpolate_cameras(a: CameraView, b: CameraView, s: float) -> CameraView:
    """Slerp the rotation, lerp the center; intrinsics from ``a``."""
    rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    r = Slerp([0.0, 1.0], rots)([s]).as_matrix()[0]
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    center = (1 - s) * a.center + s * b.center
    return a.with_pose(r, -r @ center)


@dataclass
class DatasetSample:
    clean: RgbdImage
    artifact: RgbdImage
    confidence: np.ndarray
    confidence_latent: np.ndarray
    context: np.ndarray
    geo: np.ndarray
    meta: dict = field(default_factory=dict)


def target_cameras(all_cams, source_idx, per_scene: int, rng, extent: float) -> list[tuple[str, CameraView]]:
    """Held-out cameras first, then interpolated and perturbed poses, alternating."""
    held = [c for i, c in enumerate(all_cams) if i not in set(source_idx)]
    out: list[tuple[str, CameraView]] = [("held_out", c) for c in held[:per_scene]]
    k = 0
    while len(out) < per_scene:
        i, j = rng.choice(len(all_cams), 2, replace=False)
        if k % 2 == 0:
            cam = interpolate_cameras(all_cams[i], all_cams[j], float(rng.uniform(0.2, 0.8)))
            out.append(("interpolated", cam))
        else:
            cam = perturb_camera(all_cams[i], float(rng.uniform(1, 5)), float(rng.uniform(0, 0.05)), int(rng.integers(2**31)), extent)
            out.append(("perturbed", cam))
        k += 1
    return out


def make_samples(
    dense_cloud: GaussianCloud,
    sparse_cloud: GaussianCloud,
    all_cams,
    M: int,
    per_scene: int,
    seed: int,
    cfg: RasterConfig | None = None,
    context: np.ndarray | None = None,
    scene_id: str = "scene",
    source_idx=None,
) -> list[DatasetSample]:
    """Render ``per_scene`` training tuples for one scene.

    The first ``M`` cameras (or ``source_idx``) are the sparse model's input
    views; their embeddings fill the first M rows of ``geo`` and the target's
    embedding is the last row.
    """
    cfg = cfg or RasterConfig()
    all_cams = list(all_cams)
    if M not in USUAL_M:
        log.warning("M=%d is outside the usual {3, 6, 9, 18}", M)
    if M < 1 or len(all_cams) < max(M, 2):
        raise ValueError(f"need at least max(M, 2) cameras, got {len(all_cams)} for M={M}")
    source_idx = list(range(M)) if source_idx is None else list(source_idx)
    if len(source_idx) != M:
        raise ValueError("source_idx must list M cameras")
    if context is None:
        context = np.zeros((M, CONTEXT_DIM), np.float32)
    context = np.asarray(context, np.float32)
    if context.shape != (M, CONTEXT_DIM):
        raise ValueError(f"context must be ({M}, {CONTEXT_DIM})")
    rng = np.random.default_rng(seed)
    extent = scene_extent(all_cams)
    src_geo = camera_embeddings([all_cams[i] for i in source_idx])
    samples = []
    for idx, (kind, cam) in enumerate(target_cameras(all_cams, source_idx, per_scene, rng, extent)):
        clean = rasterize(dense_cloud, cam, cfg)
        art = rasterize(sparse_cloud, cam, cfg)
        conf = confidence_map(art, cfg)
        geo = np.concatenate([src_geo, camera_embeddings([cam])]).astype(np.float32)
        samples.append(DatasetSample(
            clean.to_rgbd(), art.to_rgbd(), conf, downsample_confidence(conf), context, geo,
            {"scene_id": scene_id, "M": M, "index": idx, "kind": kind, "camera": io.camera_to_dict(cam), "seed": seed},
        ))
    return samples


def write_sample(directory, sample: DatasetSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_png(d / "render.png", sample.artifact.rgb)
    io.write_pfm(d / "depth.pfm", sample.artifact.depth)
    io.write_pfm(d / "conf.pfm", sample.confidence)
    io.write_pfm(d / "conf_latent.pfm", sample.confidence_latent)
    io.write_f32(d / "context.f32", sample.context)
    io.write_f32(d / "geo.f32", sample.geo)
    io.write_png(d / "clean.png", sample.clean.rgb)
    io.write_pfm(d / "clean_depth.pfm", sample.clean.depth)
    meta = dict(sample.meta, width=sample.clean.width, height=sample.clean.height)
    io.write_json(d / "meta.json", meta)


def read_sample(directory) -> DatasetSample:
    d = Path(directory)
    meta = io.read_json(d / "meta.json")
    m = int(meta["M"])
    artifact = RgbdImage(io.read_png(d / "render.png"), io.read_pfm(d / "depth.pfm"))
    clean = RgbdImage(io.read_png(d / "clean.png"), io.read_pfm(d / "clean_depth.pfm"))
    ctx = io.read_f32(d / "context.f32", CONTEXT_DIM)
    geo = io.read_f32(d / "geo.f32", 78)
    if ctx.shape[0] != m or geo.shape[0] != m + 1:
        raise io.FormatError(d, 0, f"tensor rows do not match M={m}")
    return DatasetSample(clean, artifact, io.read_pfm(d / "conf.pfm"), io.read_pfm(d / "conf_latent.pfm"), ctx, geo, meta)


def write_dataset(out_dir, samples, scene_id: str = "scene") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}"
        write_sample(out / name, s)
        entries.append({"dir": name, "scene_id": s.meta.get("scene_id", scene_id), "M": s.meta["M"]})
    manifest = out / "manifest.json"
    io.write_json(manifest, {"samples": entries})
    return manifest
