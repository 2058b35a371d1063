"""Refiners: whatever turns an artifact-laden novel-view render into a cleaner RGBD image.

Three implementations ship here: identity (returns the render), oracle
(renders a hidden reference cloud from the same camera) and an external
program driven through a request directory.

Request directory layout, all written by :func:`write_request`::

    render.png         8-bit RGB artifact render
    depth.pfm          rendered depth, float32 grayscale PFM
    conf.pfm           raw confidence map
    conf_latent.pfm    confidence pooled 8x8
    context.f32        M x 768 little-endian float32, row-major
    geo.f32            (M+1) x 78 little-endian float32, row-major
    meta.json          width, height, M, seed, camera, ...

The program is called as ``CMD... <request_dir>`` and must write
``refined.png`` and ``refined_depth.pfm`` into the same directory.

This module also works as a tiny stand-alone refiner program::

    python3 -m sparsesplat.refiners copy DIR
    python3 -m sparsesplat.refiners oracle REF.ply DIR
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .camera_geom import camera_embeddings
from .core import CameraView, GaussianCloud, RgbdImage
from .dataset import CONTEXT_DIM, downsample_confidence
from .render import RasterConfig, rasterize

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


class RefinerError(RuntimeError):
    def __init__(self, message: str, request_dir=None):
        self.request_dir = None if request_dir is None else str(request_dir)
        if request_dir is not None:
            message = f"{message} (request kept in {request_dir})"
        super().__init__(message)


class RefinerTimeout(RefinerError):
    pass


@dataclass
class RefinerRequest:
    render: RgbdImage
    confidence: np.ndarray
    confidence_latent: np.ndarray
    context: np.ndarray
    geo: np.ndarray
    camera: CameraView
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return int(self.context.shape[0])


@dataclass
class RefinerResponse:
    refined: RgbdImage

    def quantized(self) -> "RefinerResponse":
        """Snap to what survives the file protocol: 8-bit RGB and float32 depth."""
        rgb = io.to_uint8(self.refined.rgb).astype(np.float64) / 255.0
        depth = np.asarray(self.refined.depth, np.float32).astype(np.float64)
        return RefinerResponse(RgbdImage(rgb, depth))


def build_request(render_out, camera: CameraView, input_cams, context=None, meta=None) -> RefinerRequest:
    """Assemble a request from a render (with confidence already filled in)."""
    m = len(input_cams)
    if context is None:
        context = np.zeros((m, CONTEXT_DIM), np.float32)
    context = np.asarray(context, np.float32)
    if context.shape != (m, CONTEXT_DIM):
        raise ValueError(f"context must be ({m}, {CONTEXT_DIM}), got {context.shape}")
    geo = camera_embeddings(list(input_cams) + [camera]).astype(np.float32)
    conf = np.asarray(render_out.confidence, dtype=np.float64)
    return RefinerRequest(render_out.to_rgbd(), conf, downsample_confidence(conf), context, geo, camera, dict(meta or {}))


def _check_dims(req: RefinerRequest, resp: RefinerResponse, where=None) -> RefinerResponse:
    if resp.refined.rgb.shape != req.render.rgb.shape:
        raise RefinerError(
            f"response is {resp.refined.width}x{resp.refined.height}, request was {req.render.width}x{req.render.height}", where
        )
    return resp


class IdentityRefiner:
    name = "identity"

    def __call__(self, req: RefinerRequest) -> RefinerResponse:
        return RefinerResponse(RgbdImage(req.render.rgb.copy(), req.render.depth.copy()))


class OracleRefiner:
    """Returns the render of a reference cloud from the request camera."""

    name = "oracle"

    def __init__(self, reference: GaussianCloud, cfg: RasterConfig | None = None):
        self.reference = reference
        self.cfg = cfg or RasterConfig()

    def __call__(self, req: RefinerRequest) -> RefinerResponse:
        out = rasterize(self.reference, req.camera, self.cfg)
        return _check_dims(req, RefinerResponse(out.to_rgbd()))


def write_request(req: RefinerRequest, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_png(d / "render.png", req.render.rgb)
    io.write_pfm(d / "depth.pfm", req.render.depth)
    io.write_pfm(d / "conf.pfm", req.confidence)
    io.write_pfm(d / "conf_latent.pfm", req.confidence_latent)
    io.write_f32(d / "context.f32", req.context)
    io.write_f32(d / "geo.f32", req.geo)
    meta = dict(req.meta)
    meta.update(width=req.render.width, height=req.render.height, M=req.M, camera=io.camera_to_dict(req.camera))
    meta.setdefault("seed", 0)
    io.write_json(d / "meta.json", meta)
    return d


def read_request(directory) -> RefinerRequest:
    d = Path(directory)
    meta = io.read_json(d / "meta.json")
    render = RgbdImage(io.read_png(d / "render.png"), io.read_pfm(d / "depth.pfm"))
    return RefinerRequest(
        render, io.read_pfm(d / "conf.pfm"), io.read_pfm(d / "conf_latent.pfm"),
        io.read_f32(d / "context.f32", CONTEXT_DIM), io.read_f32(d / "geo.f32", 78),
        io.camera_from_dict(meta["camera"], d / "meta.json"), meta,
    )


def write_response(resp: RefinerResponse, directory) -> None:
    d = Path(directory)
    io.write_png(d / "refined.png", resp.refined.rgb)
    io.write_pfm(d / "refined_depth.pfm", resp.refined.depth)


def read_response(directory) -> RefinerResponse:
    d = Path(directory)
    rgb = io.read_png(d / "refined.png")
    depth = io.read_pfm(d / "refined_depth.pfm").astype(np.float64)
    return RefinerResponse(RgbdImage(rgb, np.maximum(depth, 0.0)))


class SubprocessRefiner:
    """Runs an external program on a request directory and reads its response."""

    name = "exec"

    def __init__(self, command, workdir=None, timeout: float = DEFAULT_TIMEOUT, keep: bool = False):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty refiner command")
        self.workdir = Path(workdir) if workdir is not None else Path(tempfile.mkdtemp(prefix="sparsesplat-refine-"))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.timeout = timeout
        self.keep = keep
        self.calls = 0

    def __call__(self, req: RefinerRequest) -> RefinerResponse:
        d = Path(tempfile.mkdtemp(prefix=f"req{self.calls:05d}-", dir=self.workdir))
        self.calls += 1
        write_request(req, d)
        try:
            proc = subprocess.run(self.command + [str(d)], capture_output=True, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            raise RefinerTimeout(f"refiner did not answer within {self.timeout:g} s", d) from None
        except OSError as e:
            raise RefinerError(f"cannot start refiner {self.command[0]!r}: {e.strerror}", d) from None
        if proc.returncode != 0:
            tail = proc.stderr.decode(errors="replace").strip().splitlines()[-1:] or [""]
            raise RefinerError(f"refiner exited with status {proc.returncode}: {tail[0]}", d)
        try:
            resp = read_response(d)
        except (io.FormatError, ValueError) as e:
            raise RefinerError(f"malformed response: {e}", d) from None
        resp = _check_dims(req, resp, d)
        if not self.keep:
            for f in d.iterdir():
                f.unlink()
            d.rmdir()
        return resp


def refine_via_subprocess(req: RefinerRequest, endpoint, command, timeout: float = DEFAULT_TIMEOUT) -> RefinerResponse:
    return SubprocessRefiner(command, endpoint, timeout, keep=True)(req)


def make_refiner(choice: str, cfg: RasterConfig | None = None, workdir=None, timeout: float = DEFAULT_TIMEOUT):
    """Parse ``identity``, ``oracle:REF.ply`` or ``exec:CMD``."""
    if choice == "identity":
        return IdentityRefiner()
    if choice.startswith("oracle:"):
        return OracleRefiner(io.read_ply(choice[len("oracle:"):]), cfg)
    if choice.startswith("exec:"):
        return SubprocessRefiner(choice[len("exec:"):], workdir, timeout)
    raise ValueError(f"unknown refiner {choice!r}; expected identity, oracle:REF.ply or exec:CMD")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) == 2 and argv[0] == "copy":
        req = read_request(argv[1])
        write_response(IdentityRefiner()(req), argv[1])
        return 0
    if len(argv) == 3 and argv[0] == "oracle":
        req = read_request(argv[2])
        write_response(OracleRefiner(io.read_ply(argv[1]))(req), argv[2])
        return 0
    print("usage: python3 -m sparsesplat.refiners {copy DIR | oracle REF.ply DIR}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
