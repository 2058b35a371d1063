import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsesplat import io
from sparsesplat.core import CameraView
from sparsesplat.synthetic import random_camera, random_cloud, rng_stream


def _f32_bytes(a):
    return np.asarray(a, "<f4").tobytes()


@pytest.mark.parametrize("degree", [0, 3])
@pytest.mark.parametrize("seed", range(3))
def test_ply_round_trip_bit_exact(tmp_path, degree, seed):
    cloud = random_cloud(rng_stream(seed, "ply"), 37, sh_degree=degree)
    p = tmp_path / "c.ply"
    io.write_ply(p, cloud)
    back = io.read_ply(p)
    assert back.sh_degree == degree and len(back) == 37
    io.write_ply(tmp_path / "d.ply", back)
    assert p.read_bytes() == (tmp_path / "d.ply").read_bytes()
    assert _f32_bytes(back.positions) == _f32_bytes(cloud.positions)


def test_ply_layout_and_property_order(tmp_path):
    p = tmp_path / "c.ply"
    io.write_ply(p, random_cloud(rng_stream(0, "lay"), 3, sh_degree=3))
    header = p.read_bytes().split(b"end_header\n")[0].decode()
    names = [ln.split()[-1] for ln in header.splitlines() if ln.startswith("property")]
    assert names == io.splat_ply_properties(3) and len(names) == 62
    assert len(p.read_bytes()) == len(header) + len("end_header\n") + 3 * 62 * 4


def test_ply_missing_opacity(tmp_path):
    p = tmp_path / "bad.ply"
    names = [n for n in io.splat_ply_properties(0) if n != "opacity"]
    head = ["ply", "format binary_little_endian 1.0", "element vertex 1"] + [f"property float {n}" for n in names] + ["end_header"]
    p.write_bytes(("\n".join(head) + "\n").encode() + np.ones(len(names), "<f4").tobytes())
    with pytest.raises(io.FormatError, match="opacity"):
        io.read_ply(p)


def test_ply_truncated_and_bad_magic(tmp_path):
    p = tmp_path / "c.ply"
    io.write_ply(p, random_cloud(rng_stream(1, "tr"), 4))
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(io.FormatError) as e:
        io.read_ply(p)
    assert e.value.offset > 0 and str(p) in str(e.value)
    p.write_bytes(b"plx\n" + data[4:])
    with pytest.raises(io.FormatError):
        io.read_ply(p)


def test_points_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(20, 3)).astype(np.float32)
    col = rng.integers(0, 256, (20, 3)) / 255.0
    io.write_points(tmp_path / "p.ply", pos, col)
    p2, c2 = io.read_points(tmp_path / "p.ply")
    assert np.array_equal(p2, pos) and np.allclose(c2, col)


@settings(max_examples=25)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(allow_nan=False, width=32)))
def test_pfm_round_trip_bit_exact(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    io.write_pfm(p, a)
    assert io.read_pfm(p).tobytes() == a.astype("<f4").tobytes()


def test_pfm_header_and_layout(tmp_path):
    p = tmp_path / "one.pfm"
    io.write_pfm(p, np.array([[2.5]]))
    data = p.read_bytes()
    assert len(data) == 15 + 4 and data[:15] == b"Pf\n1 1\n-1.0000\n"
    io.write_pfm(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
    # bottom row first on disk
    assert np.frombuffer(p.read_bytes()[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_errors(tmp_path):
    p = tmp_path / "c.pfm"
    p.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(io.FormatError, match="PF"):
        io.read_pfm(p)
    p.write_bytes(b"Pf\n4 4\n-1.0\n" + bytes(12))
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_pfm(p)
    with pytest.raises(ValueError):
        io.write_pfm(p, np.array([[np.nan]]))
    with pytest.raises(ValueError):
        io.write_pfm(p, np.zeros((2, 2, 3)))


def test_pfm_big_endian(tmp_path):
    p = tmp_path / "be.pfm"
    p.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([1.5, -2.0], ">f4").tobytes())
    assert io.read_pfm(p).tolist() == [[1.5, -2.0]]


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(1, 80), st.integers(0, 2**31 - 1))
def test_f32_round_trip(tmp_path_factory, rows, cols, seed):
    a = np.random.default_rng(seed).normal(size=(rows, cols)).astype(np.float32)
    p = tmp_path_factory.mktemp("f32") / "a.f32"
    io.write_f32(p, a)
    assert io.read_f32(p, cols).tobytes() == a.tobytes()


def test_f32_bad_size(tmp_path):
    p = tmp_path / "a.f32"
    p.write_bytes(bytes(10))
    with pytest.raises(io.FormatError):
        io.read_f32(p)
    p.write_bytes(bytes(12))
    with pytest.raises(io.FormatError):
        io.read_f32(p, 2)


def test_cameras_round_trip_bit_exact(tmp_path):
    rng = rng_stream(0, "cams")
    cams = [random_camera(rng) for _ in range(5)]
    io.write_cameras(tmp_path / "c.json", cams)
    back = io.read_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert a.rotation.tobytes() == b.rotation.tobytes() and a.translation.tobytes() == b.translation.tobytes()
        assert (a.fx, a.cy, a.width) == (b.fx, b.cy, b.width)


def test_camera_reflection_rejected(tmp_path):
    d = io.camera_to_dict(CameraView(8, 8, 4.0, 4.0, 4.0, 4.0))
    d["rotation"] = np.diag([1.0, 1.0, -1.0]).tolist()
    (tmp_path / "c.json").write_text(json.dumps([d]))
    with pytest.raises(io.FormatError, match="determinant"):
        io.read_cameras(tmp_path / "c.json")


def test_camera_forward_minus_z():
    # an OpenGL-style camera at the origin looking down -z
    d = {"width": 8, "height": 8, "fx": 4, "fy": 4, "cx": 4, "cy": 4,
         "rotation": np.eye(3).tolist(), "translation": [0, 0, 0], "convention": "forward_-z"}
    cam = io.camera_from_dict(d)
    assert np.allclose(cam.forward, [0, 0, -1]) and np.allclose(cam.up, [0, 1, 0])


def test_camera_near_orthonormal_is_cleaned():
    r = np.eye(3) + 1e-6
    d = {"width": 8, "height": 8, "fx": 4, "fy": 4, "cx": 4, "cy": 4, "rotation": r.tolist(), "translation": [0, 0, 0]}
    cam = io.camera_from_dict(d)
    assert np.abs(cam.rotation.T @ cam.rotation - np.eye(3)).max() < 1e-12
    d["rotation"] = (np.eye(3) * 1.1).tolist()
    with pytest.raises(io.FormatError):
        io.camera_from_dict(d)


def test_camera_missing_field(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"cameras": [{"width": 8}]}))
    with pytest.raises(io.FormatError, match="missing field"):
        io.read_cameras(tmp_path / "c.json")


def test_png_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    io.write_png(tmp_path / "a.png", rgb)
    assert np.array_equal(io.read_png(tmp_path / "a.png"), rgb)
