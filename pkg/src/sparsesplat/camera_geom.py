"""Per-camera conditioning signals and the elliptical novel-view trajectory."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraView

EMBED_BANDS = 6


@dataclass(frozen=True)
class PluckerRay:
    direction: np.ndarray
    moment: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.direction, self.moment])


def plucker_from_camera(cam: CameraView) -> PluckerRay:
    """Ray through the camera center along its forward (+z) axis, as (d, o x d)."""
    d = np.asarray(cam.rotation[2], dtype=np.float64)
    norm = np.linalg.norm(d)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("degenerate camera rotation")
    d = d / norm
    o = cam.center
    return PluckerRay(d, np.cross(o, d))


def plucker_from_ray(origin, direction) -> PluckerRay:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return PluckerRay(d, np.cross(np.asarray(origin, dtype=np.float64), d))


def fourier_encode(r, K: int = EMBED_BANDS) -> np.ndarray:
    """[r, sin(pi f_1 r), cos(pi f_1 r), ..., sin(pi f_K r), cos(pi f_K r)] with f_k = k.

    For a 6-vector and K = 6 the result has 78 entries.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    parts = [r]
    for k in range(1, K + 1):
        parts.append(np.sin(k * np.pi * r))
        parts.append(np.cos(k * np.pi * r))
    return np.concatenate(parts)


def camera_embedding(cam: CameraView, K: int = EMBED_BANDS) -> np.ndarray:
    return fourier_encode(plucker_from_camera(cam).as_vector(), K)


def camera_embeddings(cams, K: int = EMBED_BANDS) -> np.ndarray:
    """Stacked embeddings, one row per camera: (len(cams), 6 * (1 + 2K))."""
    if not cams:
        return np.zeros((0, 6 * (1 + 2 * K)))
    return np.stack([camera_embedding(c, K) for c in cams])


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipseTrajectory:
    center: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray
    semi_a: float
    semi_b: float
    plane_normal: np.ndarray
    look_target: np.ndarray

    def point(self, theta: float) -> np.ndarray:
        return self.center + self.semi_a * np.cos(theta) * self.basis_u + self.semi_b * np.sin(theta) * self.basis_v

    def angle_of(self, p) -> float:
        """Parameter angle of the ellipse point closest in angle to ``p``'s in-plane projection."""
        d = np.asarray(p, dtype=np.float64) - self.center
        return float(np.arctan2(d @ self.basis_v / self.semi_b, d @ self.basis_u / self.semi_a))

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "basis_u": self.basis_u.tolist(),
            "basis_v": self.basis_v.tolist(),
            "semi_a": float(self.semi_a),
            "semi_b": float(self.semi_b),
            "plane_normal": self.plane_normal.tolist(),
            "look_target": self.look_target.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EllipseTrajectory":
        return cls(
            np.asarray(d["center"], float), np.asarray(d["basis_u"], float), np.asarray(d["basis_v"], float),
            float(d["semi_a"]), float(d["semi_b"]), np.asarray(d["plane_normal"], float), np.asarray(d["look_target"], float),
        )


def _fit_conic(pts: np.ndarray):
    """Direct least-squares ellipse fit (Halir-Flusser form). Returns conic coefficients or None."""
    x, y = pts[:, 0], pts[:, 1]
    d1 = np.stack([x * x, x * y, y * y], 1)
    d2 = np.stack([x, y, np.ones_like(x)], 1)
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        return None
    m = s1 + s2 @ t
    m = np.stack([m[2] / 2, -m[1], m[0] / 2])
    try:
        _, vecs = np.linalg.eig(m)
    except np.linalg.LinAlgError:
        return None
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if len(ok) != 1:
        return None
    a1 = vecs[:, ok[0]]
    return np.concatenate([a1, t @ a1])


def _conic_to_ellipse(coef):
    A, B, C, D, E, F = coef
    mq = np.array([[A, B / 2], [B / 2, C]])
    try:
        c0 = np.linalg.solve(2 * mq, [-D, -E])
    except np.linalg.LinAlgError:
        return None
    f0 = A * c0[0] ** 2 + B * c0[0] * c0[1] + C * c0[1] ** 2 + D * c0[0] + E * c0[1] + F
    lam, vec = np.linalg.eigh(mq)
    with np.errstate(divide="ignore", invalid="ignore"):
        axes2 = -f0 / lam
    if not np.all(np.isfinite(axes2)) or np.any(axes2 <= 0):
        return None
    axes = np.sqrt(axes2)
    major = int(np.argmax(axes))
    return c0, axes[major], axes[1 - major], vec[:, major]


def _fit_circle(pts: np.ndarray):
    x, y = pts[:, 0], pts[:, 1]
    a = np.stack([x, y, np.ones_like(x)], 1)
    sol, *_ = np.linalg.lstsq(a, -(x * x + y * y), rcond=None)
    c0 = -sol[:2] / 2
    r = np.sqrt(max(c0 @ c0 - sol[2], 0.0))
    return c0, r, r, np.array([1.0, 0.0])


def _default_target(cams, centroid) -> np.ndarray:
    # slide the centroid along the mean view direction to the point closest
    # (in least squares) to all optical axes
    fwd = np.stack([c.forward / np.linalg.norm(c.forward) for c in cams])
    mean_dir = fwd.mean(0)
    if np.linalg.norm(mean_dir) < 1e-9:
        return centroid
    mean_dir /= np.linalg.norm(mean_dir)
    num = den = 0.0
    for c, f in zip(cams, fwd):
        proj = np.eye(3) - np.outer(f, f)
        num += mean_dir @ proj @ (c.center - centroid)
        den += mean_dir @ proj @ mean_dir
    s = num / den if den > 1e-12 else 0.0
    return centroid + s * mean_dir


def fit_trajectory(cams, target=None, points=None) -> EllipseTrajectory:
    """Fit a planar ellipse through camera centers.

    The plane comes from a principal-component fit; the in-plane ellipse from a
    direct conic fit (>= 5 cameras), falling back to the least-squares circle
    when the conic is underdetermined or not an ellipse. ``target`` fixes the
    look-at point; otherwise the centroid of ``points`` is used when given,
    else the camera centroid pushed along the mean viewing direction.
    """
    cams = list(cams)
    if len(cams) < 3:
        raise ValueError("fit_trajectory needs at least 3 cameras")
    centers = np.stack([c.center for c in cams])
    mu = centers.mean(0)
    _, s, vt = np.linalg.svd(centers - mu)
    if s[0] < 1e-12 or s[1] < 1e-9 * s[0]:
        raise ValueError("camera centers are collinear")
    e1 = vt[0]
    normal = vt[2] / np.linalg.norm(vt[2])
    e2 = np.cross(normal, e1)
    local = np.stack([(centers - mu) @ e1, (centers - mu) @ e2], 1)
    scale = np.sqrt(np.mean(np.sum(local**2, 1)))
    pts = local / scale

    fit = None
    if len(cams) >= 5:
        coef = _fit_conic(pts)
        if coef is not None:
            fit = _conic_to_ellipse(coef)
    if fit is None:
        fit = _fit_circle(pts)
    c0, a, b, axis = fit
    a, b = a * scale, b * scale
    center = mu + scale * (c0[0] * e1 + c0[1] * e2)
    u = axis[0] * e1 + axis[1] * e2
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)

    # orient the normal toward the cameras' up hemisphere
    if np.mean([c.up @ normal for c in cams]) < 0:
        normal = -normal
        v = -v

    if target is not None and not (isinstance(target, str) and target == "auto"):
        look = np.asarray(target, dtype=np.float64)
    elif points is not None and len(points):
        look = np.asarray(points, dtype=np.float64).reshape(-1, 3).mean(0)
    else:
        look = _default_target(cams, centers.mean(0))
    return EllipseTrajectory(center, u, v, float(a), float(b), normal, look)


def sample_pose(traj: EllipseTrajectory, theta: float, reference: CameraView) -> CameraView:
    """Camera on the ellipse at ``theta`` looking at the trajectory target.

    Intrinsics come from ``reference``; world up is the plane normal, flipped
    if needed to agree with the reference camera's up direction.
    """
    eye = traj.point(theta)
    up = traj.plane_normal if reference.up @ traj.plane_normal >= 0 else -traj.plane_normal
    if np.linalg.norm(traj.look_target - eye) < 1e-12:
        raise ValueError("sampled camera center coincides with the look-at target")
    return CameraView.look_at(
        eye, traj.look_target, up, reference.width, reference.height,
        reference.fx, reference.fy, reference.cx, reference.cy,
    )


def trajectory_angles(n: int = 60) -> np.ndarray:
    """Fixed uniform angle set, listed in a coprime-stride order.

    Visiting them in this order (and cycling) keeps every prefix spread around
    the whole ellipse instead of sweeping one arc first.
    """
    base = 2 * np.pi * np.arange(n) / n
    stride = max(1, int(round(n * 0.381966)))  # golden-ratio stride
    while np.gcd(stride, n) != 1:
        stride += 1
    return base[(np.arange(n) * stride) % n]
