"""File formats: splat PLY, point-cloud PLY, PFM, camera JSON, raw float32, PNG.

Float payloads round-trip bit-exactly. Every reader failure raises
:class:`FormatError` carrying the file path and the byte offset where
parsing stopped.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraView, GaussianCloud

CONVENTIONS = ("forward_+z", "forward_-z")
_FLIP = np.diag([1.0, -1.0, -1.0])

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}: offset {self.offset}: {message}")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def splat_ply_properties(sh_degree: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    if sh_degree == 3:
        names += [f"f_rest_{i}" for i in range(45)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def _read_ply_header(path, data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n"):
        raise FormatError(path, 0, "missing 'ply' magic")
    if end < 0:
        raise FormatError(path, 0, "missing end_header")
    body = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")[1:]
    offset = 4
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            pass
        elif tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(path, offset, f"malformed element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(path, offset, "property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise FormatError(path, offset, f"unsupported property {line!r}")
        else:
            raise FormatError(path, offset, f"unexpected header line {line!r}")
        offset += len(line) + 1
    if fmt != "binary_little_endian":
        raise FormatError(path, 4, f"only binary_little_endian PLY is supported, got {fmt!r}")
    return elements, body


def read_ply_vertices(path) -> np.ndarray:
    """Structured array of the vertex element of a binary little-endian PLY."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from e
    elements, offset = _read_ply_header(path, data)
    for name, count, props in elements:
        if any(t is None for _, t in props):
            if name == "vertex":
                raise FormatError(path, offset, "list properties in vertex element")
            raise FormatError(path, offset, f"cannot skip list element {name!r} before vertex data")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        size = dtype.itemsize * count
        if len(data) < offset + size:
            raise FormatError(path, len(data), f"truncated payload: element {name!r} needs {size} bytes at offset {offset}")
        if name == "vertex":
            return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += size
    raise FormatError(path, offset, "no vertex element")


def _need(path, arr, names):
    for n in names:
        if n not in arr.dtype.names:
            raise FormatError(path, 0, f"missing property {n!r}")
    return np.stack([arr[n].astype(np.float64) for n in names], -1)


def read_ply(path) -> GaussianCloud:
    v = read_ply_vertices(path)
    names = v.dtype.names
    degree = 3 if "f_rest_0" in names else 0
    pos = _need(path, v, ["x", "y", "z"])
    dc = _need(path, v, ["f_dc_0", "f_dc_1", "f_dc_2"])
    opacity = _need(path, v, ["opacity"])[:, 0]
    scale = _need(path, v, ["scale_0", "scale_1", "scale_2"])
    rot = _need(path, v, ["rot_0", "rot_1", "rot_2", "rot_3"])
    n = len(v)
    if degree == 3:
        rest = _need(path, v, [f"f_rest_{i}" for i in range(45)]).reshape(n, 3, 15)
        sh = np.concatenate([dc[:, :, None], rest], axis=2)
    else:
        sh = dc[:, :, None]
    try:
        return GaussianCloud(pos, rot, scale, opacity, sh, degree)
    except ValueError as e:
        raise FormatError(path, 0, str(e)) from e


def write_ply(path, cloud: GaussianCloud) -> None:
    names = splat_ply_properties(cloud.sh_degree)
    n = len(cloud)
    cols = [cloud.positions, np.zeros((n, 3)), cloud.sh_coeffs[:, :, 0]]
    if cloud.sh_degree == 3:
        cols.append(cloud.sh_coeffs[:, :, 1:].reshape(n, 45))
    cols += [cloud.logit_opacities[:, None], cloud.log_scales, cloud.rotations]
    flat = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(flat).tobytes())


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Point cloud PLY -> (positions (N,3), colors (N,3) in [0,1]).

    Colors come from red/green/blue (uchar scaled by 1/255, floats taken as
    is); points without color are mid-gray.
    """
    v = read_ply_vertices(path)
    pos = _need(path, v, ["x", "y", "z"])
    if v.dtype.names and "red" in v.dtype.names:
        col = _need(path, v, ["red", "green", "blue"])
        if v["red"].dtype.kind in "iu":
            col = col / 255.0
    else:
        col = np.full_like(pos, 0.5)
    return pos, np.clip(col, 0.0, 1.0)


def write_points(path, positions, colors=None) -> None:
    pos = np.asarray(positions, dtype="<f4").reshape(-1, 3)
    n = len(pos)
    col = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr = np.empty(n, dtype)
    arr["x"], arr["y"], arr["z"] = pos.T
    rgb = np.round(np.clip(col, 0, 1) * 255).astype("u1")
    arr["red"], arr["green"], arr["blue"] = rgb.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {c}" for c in "xyz"] + [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, arr) -> None:
    """Grayscale little-endian PFM, rows stored bottom-up."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"PFM maps must be 2-D, got shape {a.shape}")
    a = a.astype("<f4")
    if np.isnan(a).any():
        raise ValueError("refusing to write NaN into a PFM map")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0000\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from e
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise FormatError(path, 0, "truncated header")
    magic, dims, scale_s, payload = parts
    if magic == b"PF":
        raise FormatError(path, 0, "color PFM ('PF') is not supported; expected grayscale 'Pf'")
    if magic != b"Pf":
        raise FormatError(path, 0, f"bad magic {magic[:8]!r}")
    off = len(magic) + 1
    try:
        w, h = (int(t) for t in dims.split())
    except ValueError:
        raise FormatError(path, off, f"bad dimensions line {dims[:32]!r}") from None
    if w <= 0 or h <= 0:
        raise FormatError(path, off, "non-positive dimensions")
    off += len(dims) + 1
    try:
        scale = float(scale_s)
    except ValueError:
        raise FormatError(path, off, f"bad scale line {scale_s[:32]!r}") from None
    if scale == 0:
        raise FormatError(path, off, "zero scale")
    off += len(scale_s) + 1
    need = 4 * w * h
    if len(payload) < need:
        raise FormatError(path, off + len(payload), f"truncated payload: need {need} bytes")
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(payload, dtype=dt, count=w * h).reshape(h, w)
    return a[::-1].astype(np.float32)


# ---------------------------------------------------------------------------
# raw float32 tensors
# ---------------------------------------------------------------------------


def write_f32(path, arr) -> None:
    np.ascontiguousarray(np.asarray(arr), dtype="<f4").tofile(path)


def read_f32(path, cols: int | None = None) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from e
    if len(data) % 4:
        raise FormatError(path, len(data) - len(data) % 4, "size is not a multiple of 4 bytes")
    a = np.frombuffer(data, dtype="<f4").astype(np.float32)
    if cols is None:
        return a
    if cols <= 0 or a.size % cols:
        raise FormatError(path, len(data), f"{a.size} floats do not form rows of {cols}")
    return a.reshape(-1, cols)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def to_uint8(rgb) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, rgb) -> None:
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """8-bit image as float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise FormatError(path, 0, f"cannot decode PNG: {e}") from e
    return arr / 255.0


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


def _orthonormalize(path, i, r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise FormatError(path, 0, f"camera {i}: rotation must be a finite 3x3 matrix")
    if np.linalg.det(r) <= 0:
        raise FormatError(path, 0, f"camera {i}: rotation has non-positive determinant")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > 1e-3:
        raise FormatError(path, 0, f"camera {i}: rotation is not orthonormal (error {err:.2e})")
    if err > 1e-9:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
    return r


def camera_to_dict(cam: CameraView) -> dict:
    return {
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
        "convention": "forward_+z",
    }


def camera_from_dict(d: dict, path="<dict>", i: int = 0, default_convention: str = "forward_+z") -> CameraView:
    conv = d.get("convention", default_convention)
    if conv not in CONVENTIONS:
        raise FormatError(path, 0, f"camera {i}: unknown convention {conv!r}")
    try:
        r = _orthonormalize(path, i, d["rotation"])
        t = np.asarray(d["translation"], dtype=np.float64).reshape(3)
        if conv == "forward_-z":
            r, t = _FLIP @ r, _FLIP @ t
        return CameraView(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), r, t)
    except KeyError as e:
        raise FormatError(path, 0, f"camera {i}: missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(path, 0, f"camera {i}: {e}") from None


def write_cameras(path, cams) -> None:
    doc = {"convention": "forward_+z", "cameras": [camera_to_dict(c) for c in cams]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_cameras(path) -> list[CameraView]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, e.pos, f"invalid JSON: {e.msg}") from None
    if isinstance(doc, list):
        doc = {"cameras": doc}
    if not isinstance(doc, dict) or not isinstance(doc.get("cameras"), list):
        raise FormatError(path, 0, "expected an object with a 'cameras' list")
    default = doc.get("convention", "forward_+z")
    return [camera_from_dict(c, path, i, default) for i, c in enumerate(doc["cameras"])]


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------


def write_json(path, obj) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise FormatError(path, 0, f"cannot read: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise FormatError(path, e.pos, f"invalid JSON: {e.msg}") from None
