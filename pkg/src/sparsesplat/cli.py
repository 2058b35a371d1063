"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical failure.
The default worker-thread count comes from ``SPARSESPLAT_THREADS``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "SPARSESPLAT_THREADS"

log = logging.getLogger("sparsesplat")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(p.iterdir()) if p.is_dir() else [p]
    for f in files:
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _image_files(directory) -> list[Path]:
    d = _existing(directory, "image directory")
    files = sorted(d.glob("*.png")) if d.is_dir() else [d]
    if not files:
        raise FileNotFoundError(f"no PNG images in {directory}")
    return files


def _raster_cfg(args):
    from .render import RasterConfig

    return RasterConfig(naive=getattr(args, "naive", False))


def _load_images(directory, cams):
    from .core import RgbdImage
    from .io import read_png

    files = _image_files(directory)
    if len(files) != len(cams):
        raise UsageError(f"{len(files)} images for {len(cams)} cameras")
    out = []
    for f, c in zip(files, cams):
        rgb = read_png(f)
        if rgb.shape[:2] != (c.height, c.width):
            raise UsageError(f"{f.name} is {rgb.shape[1]}x{rgb.shape[0]}, camera expects {c.width}x{c.height}")
        out.append(RgbdImage(rgb, np.zeros(rgb.shape[:2])))
    return out


def _set_threads(n):
    if n is None:
        return
    import numba

    if n < 1:
        raise UsageError("--threads must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# subcommands; each returns a dict of results for the run manifest
# ---------------------------------------------------------------------------


def cmd_render(args) -> dict:
    from . import io
    from .render import confidence_map, enhancer_confidence, rasterize

    cloud = io.read_ply(_existing(args.ply, "PLY"))
    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _raster_cfg(args)
    for i, cam in enumerate(cams):
        r = rasterize(cloud, cam, cfg)
        io.write_png(out / f"view_{i:03d}.png", r.rgb)
        if args.depth:
            io.write_pfm(out / f"depth_{i:03d}.pfm", r.depth)
        if args.confidence:
            io.write_pfm(out / f"conf_{i:03d}.pfm", confidence_map(r, cfg))
        if args.enhancer_conf:
            io.write_pfm(out / f"enhancer_{i:03d}.pfm", enhancer_confidence(r, cloud, cam, cfg))
    print(f"rendered {len(cams)} view(s) of {len(cloud)} splats to {out}")
    return {"views": len(cams), "splats": len(cloud)}


def cmd_fit(args) -> dict:
    from . import io
    from .optimize import OptimizerConfig, fit_scene

    pts, cols = io.read_points(_existing(args.points, "point cloud"))
    if len(pts) == 0:
        raise UsageError("point cloud is empty")
    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    images = _load_images(args.images, cams)
    cfg = OptimizerConfig(init_iters=args.iters, seed=args.seed, optimize_poses=not args.fixed_poses, raster=_raster_cfg(args))
    res = fit_scene(pts, cols, cams, images, cfg)
    io.write_ply(args.out, res.cloud)
    if args.cameras_out:
        io.write_cameras(args.cameras_out, res.cameras)
    final = float(np.mean(res.losses[-min(50, len(res.losses)):])) if res.losses else float("nan")
    print(f"fitted {len(res.cloud)} splats; mean loss over last iterations {final:.5f}")
    return {"splats": len(res.cloud), "final_loss": final}


def cmd_trajectory(args) -> dict:
    from . import io
    from .camera_geom import fit_trajectory, sample_pose

    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    pts = io.read_points(_existing(args.points, "point cloud"))[0] if args.points else None
    traj = fit_trajectory(cams, points=pts)
    thetas = 2 * np.pi * np.arange(args.n) / args.n
    poses = [sample_pose(traj, t, cams[0]) for t in thetas]
    doc = {"trajectory": traj.to_dict(), "theta": thetas.tolist(), "cameras": [io.camera_to_dict(c) for c in poses]}
    io.write_json(args.out, doc)
    print(f"ellipse a={traj.semi_a:.4f} b={traj.semi_b:.4f}; {args.n} poses written to {args.out}")
    return {"semi_a": traj.semi_a, "semi_b": traj.semi_b}


def cmd_embed(args) -> dict:
    from . import io
    from .camera_geom import camera_embeddings

    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    geo = camera_embeddings(cams).astype(np.float32)
    io.write_f32(args.out, geo)
    print(f"wrote {geo.shape[0]}x{geo.shape[1]} embedding to {args.out}")
    return {"rows": int(geo.shape[0])}


def cmd_align(args) -> dict:
    from . import io
    from .core import RgbdImage
    from .optimize import OptimizerConfig, align_test_pose

    cloud = io.read_ply(_existing(args.ply, "PLY"))
    init = io.read_cameras(_existing(args.init_pose, "initial pose"))[0]
    rgb = io.read_png(_existing(args.image, "image"))
    if rgb.shape[:2] != (init.height, init.width):
        raise UsageError(f"image is {rgb.shape[1]}x{rgb.shape[0]}, camera expects {init.width}x{init.height}")
    cfg = OptimizerConfig(pose_align_iters=args.iters, raster=_raster_cfg(args))
    res = align_test_pose(cloud, RgbdImage(rgb, np.zeros(rgb.shape[:2])), init, cfg)
    if args.out:
        io.write_cameras(args.out, [res.camera])
    print(f"aligned pose after {args.iters} iterations; L1 {res.loss:.6f}")
    return {"loss": res.loss}


def cmd_optimize(args) -> dict:
    from . import io
    from .camera_geom import fit_trajectory
    from .dataset import CONTEXT_DIM
    from .optimize import OptimizerConfig, TrainingStack, reconstruct
    from .refiners import make_refiner

    cloud = io.read_ply(_existing(args.ply, "PLY"))
    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    images = _load_images(args.images, cams)
    cfg = OptimizerConfig(
        main_iters=args.iters, densify_interval=args.densify_interval, seed=args.seed,
        densify_grad_threshold=args.grad_threshold, raster=_raster_cfg(args),
    )
    try:
        refiner = make_refiner(args.refiner, cfg.raster, args.workdir, args.timeout)
    except ValueError as e:
        raise UsageError(str(e)) from None
    context = None
    if args.context:
        context = io.read_f32(_existing(args.context, "context features"), CONTEXT_DIM)
    pts = io.read_points(args.points)[0] if args.points else None
    traj = fit_trajectory(cams, points=pts) if len(cams) >= 3 else None
    if traj is None:
        log.warning("fewer than 3 cameras: no trajectory, no novel views")
    res = reconstruct(cloud, TrainingStack(cams, images), traj, refiner, cfg, context)
    if args.out:
        io.write_ply(args.out, res.cloud)
    print(f"refiner calls: {res.refiner_calls} ({res.refiner_failures} failed); novel views: {res.stack.n_novel}; splats: {len(res.cloud)}")
    return {"refiner_calls": res.refiner_calls, "refiner_failures": res.refiner_failures, "splats": len(res.cloud)}


def cmd_dataset(args) -> dict:
    from . import io
    from .dataset import make_samples, write_dataset

    dense = io.read_ply(_existing(args.dense, "dense PLY"))
    sparse = io.read_ply(_existing(args.sparse, "sparse PLY"))
    cams = io.read_cameras(_existing(args.cameras, "camera file"))
    samples = make_samples(dense, sparse, cams, args.M, args.per_scene, args.seed, _raster_cfg(args), scene_id=args.scene_id)
    manifest = write_dataset(args.out, samples, args.scene_id)
    print(f"wrote {len(samples)} samples; manifest {manifest}")
    return {"samples": len(samples)}


def cmd_metrics(args) -> dict:
    from . import io
    from .losses import PccUndefined, pcc_loss, psnr, ssim

    pred, gt = _existing(args.pred, "prediction directory"), _existing(args.gt, "ground-truth directory")
    names = sorted(p.name for p in pred.iterdir() if p.suffix in (".png", ".pfm") and (gt / p.name).exists())
    if not names:
        raise UsageError("no matching .png/.pfm files between the two directories")
    rows = []
    print(f"{'file':<28}{'PSNR':>8}{'SSIM':>9}{'PCC':>9}")
    for n in names:
        if n.endswith(".png"):
            a, b = io.read_png(pred / n), io.read_png(gt / n)
            if a.shape != b.shape:
                raise UsageError(f"{n}: dimension mismatch {a.shape} vs {b.shape}")
            row = {"file": n, "psnr": psnr(a, b), "ssim": ssim(a, b)}
            print(f"{n:<28}{row['psnr']:>8.2f}{row['ssim']:>9.4f}{'-':>9}")
        else:
            a, b = io.read_pfm(pred / n), io.read_pfm(gt / n)
            if a.shape != b.shape:
                raise UsageError(f"{n}: dimension mismatch {a.shape} vs {b.shape}")
            try:
                r = 1.0 - pcc_loss(a, b, (a > 0) & (b > 0))
            except PccUndefined:
                r = float("nan")
            row = {"file": n, "pcc": r}
            print(f"{n:<28}{'-':>8}{'-':>9}{r:>9.4f}")
        rows.append(row)
    return {"rows": rows}


def cmd_gradcheck(args) -> dict:
    from .grad import gradcheck
    from .synthetic import random_camera, random_cloud, rng_stream

    rng = rng_stream(args.seed, "gradcheck")
    cloud = random_cloud(rng, args.splats, sh_degree=args.degree)
    cam = random_camera(rng, args.size, args.size)
    rep = gradcheck(cloud, cam, _raster_cfg(args), seed=args.seed)
    for line in rep.lines():
        print(line)
    ok = rep.passed()
    print("PASS" if ok else "FAIL")
    if not ok:
        raise FloatingPointError("gradient check exceeded tolerance")
    return {"max_rel_error": {k: float(v) for k, v in rep.max_rel_error.items()}}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed; every random phase derives from it (default 0)")
    common.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or all cores)")
    common.add_argument("--naive", action="store_true", help="use the per-pixel reference rasterizer (slow, fully deterministic)")
    common.add_argument("--manifest", default="runs.jsonl", help="append the run record to this JSONL file (default runs.jsonl)")
    common.add_argument("--no-manifest", action="store_true", help="do not write a run record")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="sparsesplat", description="Sparse-view Gaussian splatting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("render", parents=[common], help="render a splat PLY from cameras")
    s.add_argument("--ply", required=True, help="splat PLY")
    s.add_argument("--cameras", required=True, help="camera JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--confidence", action="store_true", help="also write conf_###.pfm (raw confidence)")
    s.add_argument("--depth", action="store_true", help="also write depth_###.pfm")
    s.add_argument("--enhancer-conf", action="store_true", help="also write enhancer_###.pfm (footprint heuristic)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("fit", parents=[common], help="initialize splats from points and fit input views")
    s.add_argument("--points", required=True, help="point-cloud PLY (x, y, z, optional red/green/blue)")
    s.add_argument("--cameras", required=True, help="camera JSON, one camera per image")
    s.add_argument("--images", required=True, help="directory of PNGs, sorted by name to match cameras")
    s.add_argument("--iters", type=int, default=1000, help="optimization iterations (default 1000)")
    s.add_argument("--out", required=True, help="output splat PLY")
    s.add_argument("--cameras-out", default=None, help="write refined cameras to this JSON")
    s.add_argument("--fixed-poses", action="store_true", help="do not refine camera poses")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("trajectory", parents=[common], help="fit the ellipse trajectory and sample poses")
    s.add_argument("--cameras", required=True, help="camera JSON (at least 3 cameras)")
    s.add_argument("--n", type=int, default=60, help="number of poses (default 60)")
    s.add_argument("--points", default=None, help="optional point-cloud PLY; its centroid becomes the look-at target")
    s.add_argument("--out", required=True, help="output JSON")
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("embed", parents=[common], help="write per-camera 78-d embeddings as float32")
    s.add_argument("--cameras", required=True, help="camera JSON")
    s.add_argument("--out", required=True, help="output .f32 file (rows x 78)")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("align", parents=[common], help="optimize a test camera pose against an image")
    s.add_argument("--ply", required=True, help="splat PLY (kept frozen)")
    s.add_argument("--image", required=True, help="target PNG")
    s.add_argument("--init-pose", required=True, help="camera JSON; the first camera is the starting pose")
    s.add_argument("--iters", type=int, default=500, help="iterations (default 500)")
    s.add_argument("--out", default=None, help="write the aligned camera to this JSON")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("optimize", parents=[common], help="refine-and-densify reconstruction loop")
    s.add_argument("--ply", required=True, help="fitted splat PLY")
    s.add_argument("--cameras", required=True, help="input camera JSON")
    s.add_argument("--images", required=True, help="directory of input PNGs")
    s.add_argument("--refiner", default="identity", help="identity | oracle:REF.ply | exec:CMD (default identity)")
    s.add_argument("--iters", type=int, default=10000, help="iterations (default 10000)")
    s.add_argument("--densify-interval", type=int, default=100, help="refine one novel view every k iterations (default 100)")
    s.add_argument("--grad-threshold", type=float, default=2e-4, help="densification gradient threshold (default 2e-4)")
    s.add_argument("--points", default=None, help="optional point-cloud PLY for the trajectory target")
    s.add_argument("--context", default=None, help="M x 768 float32 context features (default zeros)")
    s.add_argument("--workdir", default=None, help="request directory root for exec refiners")
    s.add_argument("--timeout", type=float, default=300.0, help="exec refiner timeout in seconds (default 300)")
    s.add_argument("--out", default=None, help="output splat PLY")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("dataset", parents=[common], help="render clean/artifact training pairs")
    s.add_argument("--dense", required=True, help="high-quality splat PLY")
    s.add_argument("--sparse", required=True, help="low-quality splat PLY")
    s.add_argument("--cameras", required=True, help="camera JSON; the first M are the sparse model's inputs")
    s.add_argument("-M", type=int, default=3, help="number of input views (default 3)")
    s.add_argument("--per-scene", type=int, default=8, help="samples to render (default 8)")
    s.add_argument("--scene-id", default="scene", help="scene id recorded in the manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("metrics", parents=[common], help="compare two directories of renders")
    s.add_argument("--pred", required=True, help="predicted renders")
    s.add_argument("--gt", required=True, help="reference renders (same file names)")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the analytic gradients")
    s.add_argument("--splats", type=int, default=20, help="random splats (default 20)")
    s.add_argument("--size", type=int, default=32, help="image size in pixels (default 32)")
    s.add_argument("--degree", type=int, choices=(0, 3), default=0, help="SH degree (default 0)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _append_manifest(args, argv, status, timings, results):
    if args.no_manifest:
        return
    inputs = {}
    for key in ("ply", "cameras", "images", "points", "image", "init_pose", "dense", "sparse", "pred", "gt", "context"):
        v = getattr(args, key, None)
        if v and Path(v).exists():
            inputs[key] = _sha256(v)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    rec = {
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"), "command": args.command, "argv": argv, "seed": args.seed,
        "config": config, "inputs": inputs, "timings": timings, "results": results, "status": status,
    }
    with open(args.manifest, "a") as f:
        f.write(json.dumps(rec, default=str) + "\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
            return EXIT_USAGE
    from .io import FormatError
    from .refiners import RefinerError

    t0 = time.perf_counter()
    status, results, code = "ok", {}, EXIT_OK
    try:
        _set_threads(threads)
        results = args.func(args) or {}
    except UsageError as e:
        status, code = f"usage: {e}", EXIT_USAGE
    except (FormatError, OSError, RefinerError) as e:
        status, code = f"io: {e}", EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as e:
        status, code = f"numerical: {e}", EXIT_NUMERIC
    if code:
        print(f"error: {status.split(': ', 1)[1]}", file=sys.stderr)
    timings = {"total_s": round(time.perf_counter() - t0, 4)}
    try:
        _append_manifest(args, argv, status, timings, results)
    except OSError as e:
        print(f"warning: could not write run manifest: {e}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
