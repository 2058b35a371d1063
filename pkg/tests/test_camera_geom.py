import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsesplat.camera_geom import (
    EllipseTrajectory, camera_embedding, camera_embeddings, fit_trajectory, fourier_encode, plucker_from_camera,
    sample_pose, trajectory_angles,
)
from sparsesplat.core import CameraView
from sparsesplat.synthetic import ring_cameras

vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3)


def test_plucker_origin_camera():
    r = plucker_from_camera(CameraView(8, 8, 4.0, 4.0, 4.0, 4.0))
    assert np.allclose(r.as_vector(), [0, 0, 1, 0, 0, 0])


def test_plucker_offset_center():
    cam = CameraView(8, 8, 4.0, 4.0, 4.0, 4.0, np.eye(3), [-1.0, 0, 0])  # center (1, 0, 0)
    assert np.allclose(plucker_from_camera(cam).as_vector(), [0, 0, 1, 0, -1, 0])


@given(vec, vec, st.floats(-10, 10))
def test_plucker_slide_invariance(eye, target, s):
    eye, target = np.asarray(eye), np.asarray(target)
    if np.linalg.norm(target - eye) < 0.1 or np.linalg.norm(np.cross(target - eye, [0, 1, 0])) < 0.1:
        return
    cam = CameraView.look_at(eye, target, [0, 1, 0], 16, 16, 10.0)
    r = plucker_from_camera(cam)
    slid = cam.with_pose(cam.rotation, -cam.rotation @ (cam.center + s * cam.forward))
    r2 = plucker_from_camera(slid)
    assert np.abs(r.as_vector() - r2.as_vector()).max() < 1e-9
    assert abs(r.direction @ r.moment) < 1e-9
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)


def test_fourier_layout():
    out = fourier_encode(np.zeros(6), 6)
    assert out.shape == (78,)
    assert np.all(out[:6] == 0)
    for k in range(6):
        band = out[6 + 12 * k: 18 + 12 * k]
        assert np.all(band[:6] == 0) and np.all(band[6:] == 1)
    r = np.zeros(6)
    r[2] = 1.0
    out = fourier_encode(r, 6)
    assert abs(out[6 + 2]) < 1e-12 and out[12 + 2] == pytest.approx(-1.0)


@pytest.mark.parametrize("K", range(1, 9))
def test_fourier_length(K):
    assert fourier_encode(np.ones(6), K).shape == (6 * (1 + 2 * K),)


def test_fourier_rejects_bad_k():
    with pytest.raises(ValueError):
        fourier_encode(np.zeros(6), 0)


def test_embeddings_matrix_shape():
    cams = ring_cameras(4)
    m = camera_embeddings(cams)
    assert m.shape == (4, 78)
    assert np.array_equal(m[1], camera_embedding(cams[1]))


def test_circle_rig_recovered():
    cams = ring_cameras(8, radius=2.0)
    tr = fit_trajectory(cams)
    assert tr.semi_a == pytest.approx(2.0, abs=1e-6) and tr.semi_b == pytest.approx(2.0, abs=1e-6)
    assert abs(abs(tr.plane_normal @ [0, 1, 0]) - 1) < 1e-9


def test_circle_rig_in_z_plane():
    cams = [CameraView.look_at([2 * np.cos(t), 2 * np.sin(t), 0], [0, 0, 0], [0, 0, 1], 16, 16, 10.0)
            for t in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
    tr = fit_trajectory(cams)
    assert tr.semi_a == pytest.approx(2.0, abs=1e-6) and tr.semi_b == pytest.approx(2.0, abs=1e-6)
    assert np.allclose(tr.plane_normal, [0, 0, 1])


def test_ellipse_rig_recovered_and_resampled():
    cams = ring_cameras(10, radius=3.0, semi_b=1.0, phase=0.2)
    tr = fit_trajectory(cams, target=[0, 0, 0])
    assert tr.semi_a == pytest.approx(3.0, abs=1e-4) and tr.semi_b == pytest.approx(1.0, abs=1e-4)
    for vname in ("basis_u", "basis_v", "plane_normal"):
        assert np.linalg.norm(getattr(tr, vname)) == pytest.approx(1.0)
    assert abs(tr.basis_u @ tr.basis_v) < 1e-6 and abs(tr.basis_u @ tr.plane_normal) < 1e-6
    dense = np.stack([tr.point(t) for t in np.linspace(0, 2 * np.pi, 20000)])
    for c in cams:
        assert np.linalg.norm(dense - c.center, axis=1).min() < 1e-3
        assert np.linalg.norm(sample_pose(tr, tr.angle_of(c.center), cams[0]).center - c.center) < 1e-4


def test_too_few_or_collinear_cameras():
    with pytest.raises(ValueError):
        fit_trajectory(ring_cameras(2))
    line = [CameraView.look_at([x, 0, -3.0], [x, 0, 0], [0, 1, 0], 8, 8, 4.0) for x in (0.0, 1.0, 2.0)]
    with pytest.raises(ValueError):
        fit_trajectory(line)


def test_sample_pose_properties():
    cams = ring_cameras(6, radius=2.0, height=0.5)
    tr = fit_trajectory(cams, target=[0, 0, 0])
    cam0 = cams[0]
    th = tr.angle_of(cam0.center)
    p = sample_pose(tr, th, cam0)
    assert np.linalg.norm(p.center - cam0.center) < 1e-6
    q = sample_pose(tr, th + 2 * np.pi, cam0)
    assert np.allclose(p.rotation, q.rotation, atol=1e-12) and np.allclose(p.translation, q.translation, atol=1e-12)
    for t in np.linspace(0, 6, 13):
        c = sample_pose(tr, t, cam0)
        d = tr.look_target - c.center
        assert c.forward @ (d / np.linalg.norm(d)) == pytest.approx(1.0, abs=1e-6)
        assert c.up @ cam0.up > 0
        assert (c.width, c.fx, c.cy) == (cam0.width, cam0.fx, cam0.cy)


def test_sample_pose_rejects_target_on_path():
    tr = EllipseTrajectory(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), 1.0, 1.0,
                           np.array([0, 1.0, 0]), np.array([1.0, 0, 0]))
    with pytest.raises(ValueError):
        sample_pose(tr, 0.0, ring_cameras(1)[0])


def test_default_target_points_and_dict_round_trip():
    cams = ring_cameras(5, radius=3.0, height=1.0, target=(0, 0.5, 0))
    tr = fit_trajectory(cams)
    assert np.linalg.norm(tr.look_target - [0, 0.5, 0]) < 0.05
    pts = np.random.default_rng(0).normal(size=(50, 3)) + [1, 0, 0]
    assert np.allclose(fit_trajectory(cams, points=pts).look_target, pts.mean(0))
    assert EllipseTrajectory.from_dict(tr.to_dict()).semi_a == tr.semi_a


def test_trajectory_angles_cover_circle():
    a = trajectory_angles(60)
    assert len(np.unique(np.round(a, 9))) == 60
    # every prefix of 6 is spread over the circle
    gaps = np.diff(np.sort(np.r_[a[:6], a[0] + 2 * np.pi]))
    assert gaps.max() < np.pi
