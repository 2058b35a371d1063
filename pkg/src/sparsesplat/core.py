"""Scene, camera and image containers shared by every other module.

Gaussian attributes are kept pre-activation (log-scale, logit-opacity), the
same convention as community 3DGS checkpoints, so a cloud read from a PLY file
renders exactly as it was written.

Clouds are stored struct-of-arrays; ``GaussianSplat`` is the per-primitive
view returned by indexing a cloud.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

QUAT_TOL = 1e-6
ROT_TOL = 1e-6


def _sh_count(degree: int) -> int:
    if degree not in (0, 3):
        raise ValueError(f"sh_degree must be 0 or 3, got {degree}")
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def activate_opacity(logit):
    """Sigmoid activation for stored opacity logits.

    Accepts scalars or arrays; raises ``ValueError`` on non-finite input.
    """
    x = np.asarray(logit, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("opacity logit must be finite")
    # split branches keep exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (N, (degree+1)**2), for unit directions (N, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    out = np.empty((n, _sh_count(degree)))
    out[:, 0] = SH_C0
    if degree == 0:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d dir, shape (N, B, 3). Zero for degree 0."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    jac = np.zeros((n, _sh_count(degree), 3))
    if degree == 0:
        return jac
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    jac[:, 1, 1] = -SH_C1
    jac[:, 2, 2] = SH_C1
    jac[:, 3, 0] = -SH_C1
    jac[:, 4] = SH_C2[0] * np.stack([y, x, 0 * x], -1)
    jac[:, 5] = SH_C2[1] * np.stack([0 * x, z, y], -1)
    jac[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
    jac[:, 7] = SH_C2[3] * np.stack([z, 0 * x, x], -1)
    jac[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    jac[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, 0 * x], -1)
    jac[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], -1)
    jac[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
    jac[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
    jac[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
    jac[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
    jac[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, 0 * x], -1)
    return jac


def sh_to_rgb(sh_coeffs, view_dir) -> np.ndarray:
    """Evaluate one splat's color for a unit viewing direction.

    ``sh_coeffs`` is 3xB with B in {1, 16}; the result is clamped to [0, 1].
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    if sh.ndim != 2 or sh.shape[0] != 3 or sh.shape[1] not in (1, 16):
        raise ValueError(f"sh_coeffs must be 3x1 or 3x16, got {sh.shape}")
    degree = 0 if sh.shape[1] == 1 else 3
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64)[None], degree)[0]
    return np.clip(0.5 + sh @ basis, 0.0, 1.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("quaternion with zero or non-finite norm")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """d R / d q for unit-norm-agnostic quaternions, shape (N, 3, 3, 4)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    d = np.empty((q.shape[0], 3, 3, 4))
    # columns: d/dw, d/dx, d/dy, d/dz
    d[:, 0, 0] = np.stack([zero, zero, -4 * y, -4 * z], -1)
    d[:, 0, 1] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], -1)
    d[:, 0, 2] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], -1)
    d[:, 1, 0] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], -1)
    d[:, 1, 1] = np.stack([zero, -4 * x, zero, -4 * z], -1)
    d[:, 1, 2] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], -1)
    d[:, 2, 0] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], -1)
    d[:, 2, 1] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], -1)
    d[:, 2, 2] = np.stack([zero, -4 * x, -4 * y, zero], -1)
    return d


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula: axis-angle vector to rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(theta) / theta * k + (1 - np.cos(theta)) / theta**2 * k @ k


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic distance (radians) between two rotation matrices."""
    c = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSplat:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    logit_opacity: float
    sh_coeffs: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return activate_opacity(self.logit_opacity)


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """An ordered set of 3D Gaussians stored as parallel arrays.

    positions (N, 3), rotations (N, 4) as (w, x, y, z), log_scales (N, 3),
    logit_opacities (N,), sh_coeffs (N, 3, B) with B = (sh_degree + 1)**2.
    Quaternions farther than 1e-6 from unit norm are normalized on
    construction; the rest are kept bit-for-bit so file round-trips are exact.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        n = np.asarray(self.positions).reshape(-1, 3).shape[0]
        b = _sh_count(self.sh_degree)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        if n:
            norm = np.linalg.norm(rot, axis=1)
            if np.any(norm == 0) or not np.all(np.isfinite(norm)):
                raise ValueError("quaternion with zero or non-finite norm")
            off = np.abs(norm - 1.0) > QUAT_TOL
            if np.any(off):
                rot = rot.copy()
                rot[off] /= norm[off, None]
        scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        opac = np.asarray(self.logit_opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.size != n * 3 * b:
            raise ValueError(f"sh_coeffs has {sh.size} values, expected {n}x3x{b}")
        sh = sh.reshape(n, 3, b)
        for name, arr in (("positions", pos), ("log_scales", scales), ("logit_opacities", opac), ("sh_coeffs", sh)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "log_scales", scales)
        object.__setattr__(self, "logit_opacities", opac)
        object.__setattr__(self, "sh_coeffs", sh)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.logit_opacities[i]),
            self.sh_coeffs[i].copy(),
        )

    @property
    def splats(self) -> list[GaussianSplat]:
        return [self[i] for i in range(len(self))]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return activate_opacity(self.logit_opacities).reshape(-1)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        b = _sh_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, b)), sh_degree)

    @classmethod
    def from_splats(cls, splats, sh_degree: int = 0) -> "GaussianCloud":
        if not splats:
            return cls.empty(sh_degree)
        return cls(
            np.stack([s.position for s in splats]),
            np.stack([s.rotation for s in splats]),
            np.stack([s.log_scale for s in splats]),
            np.array([s.logit_opacity for s in splats]),
            np.stack([np.asarray(s.sh_coeffs).reshape(3, -1) for s in splats]),
            sh_degree,
        )

    def subset(self, idx) -> "GaussianCloud":
        return replace(
            self,
            positions=self.positions[idx],
            rotations=self.rotations[idx],
            log_scales=self.log_scales[idx],
            logit_opacities=self.logit_opacities[idx],
            sh_coeffs=self.sh_coeffs[idx],
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_degree != self.sh_degree:
            raise ValueError("cannot concatenate clouds with different sh_degree")
        return replace(
            self,
            positions=np.concatenate([self.positions, other.positions]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            logit_opacities=np.concatenate([self.logit_opacities, other.logit_opacities]),
            sh_coeffs=np.concatenate([self.sh_coeffs, other.sh_coeffs]),
        )

    def copy(self) -> "GaussianCloud":
        return self.subset(slice(None))

    def with_sh_degree(self, degree: int) -> "GaussianCloud":
        """Promote or truncate SH coefficients (higher bands zero-filled)."""
        b = _sh_count(degree)
        sh = np.zeros((len(self), 3, b))
        keep = min(b, self.sh_coeffs.shape[2])
        sh[:, :, :keep] = self.sh_coeffs[:, :, :keep]
        return replace(self, sh_coeffs=sh, sh_degree=degree)


# ---------------------------------------------------------------------------
# cameras and images
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera with a world-to-camera rotation and translation.

    The camera looks down +z with x to the right and y down. A world point p
    maps to camera frame ``rotation @ p + translation`` and to pixel
    ``(fx*x/z + cx, fy*y/z + cy)``; pixel (row i, col j) has its center at
    image coordinates (j, i).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("camera dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite extrinsics")
        if np.abs(r.T @ r - np.eye(3)).max() > ROT_TOL or abs(np.linalg.det(r) - 1.0) > ROT_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for k in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, k, float(getattr(self, k)))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    @property
    def up(self) -> np.ndarray:
        return -self.rotation[1]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def with_pose(self, rotation, translation) -> "CameraView":
        return replace(self, rotation=rotation, translation=translation)

    def perturbed(self, xi) -> "CameraView":
        """Left-multiply the extrinsics by exp(xi), xi = (omega, v).

        Camera-frame points move as p_c -> exp(omega) p_c + v.
        """
        xi = np.asarray(xi, dtype=np.float64)
        e = so3_exp(xi[:3])
        r = e @ self.rotation
        # re-project onto SO(3) so chained steps do not drift
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        return replace(self, rotation=r, translation=e @ self.translation + xi[3:])

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, cx=None, cy=None) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        if np.linalg.norm(fwd) < 1e-12:
            raise ValueError("camera center coincides with look-at target")
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(
            width,
            height,
            fx,
            fx if fy is None else fy,
            width / 2.0 if cx is None else cx,
            height / 2.0 if cy is None else cy,
            r,
            -r @ eye,
        )


@dataclass(frozen=True, eq=False)
class RgbdImage:
    """RGB in [0, 1] (H, W, 3) and depth >= 0 (H, W); depth 0 marks undefined pixels."""

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = np.clip(np.asarray(self.rgb, dtype=np.float64), 0.0, 1.0)
        depth = np.asarray(self.depth, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or depth.shape != rgb.shape[:2]:
            raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} do not match")
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(eq=False)
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    confidence: np.ndarray
    accum_alpha: np.ndarray
    # sum of blend weight / footprint area, kept for the footprint heuristic
    footprint_weight: np.ndarray | None = None
    # per-pixel fingerprint of the composited sequence (tiled path only)
    composite_hash: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def to_rgbd(self) -> RgbdImage:
        return RgbdImage(self.rgb, np.maximum(self.depth, 0.0))
