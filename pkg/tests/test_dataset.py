import numpy as np
import pytest

from sparsesplat.core import rotation_angle
from sparsesplat.dataset import (
    CONTEXT_DIM, downsample_confidence, interpolate_cameras, make_samples, perturb_camera, read_sample, scene_extent,
    write_dataset,
)
from sparsesplat.synthetic import object_scene, ring_cameras, rng_stream


def test_downsample_examples():
    assert downsample_confidence(np.ones((64, 64))).shape == (8, 8)
    c = np.arange(64.0).reshape(8, 8)
    assert downsample_confidence(c)[0, 0] == pytest.approx(c.mean())
    ragged = downsample_confidence(np.ones((20, 17)) * 3)
    assert ragged.shape == (3, 3) and np.allclose(ragged, 3)
    with pytest.raises(ValueError):
        downsample_confidence(np.ones((4, 16)))


@pytest.mark.parametrize("seed", range(5))
def test_perturb_magnitudes(seed):
    cam = ring_cameras(1, radius=3.0)[0]
    p = perturb_camera(cam, 2.0, 0.05, seed, extent=4.0)
    assert np.degrees(rotation_angle(cam.rotation, p.rotation)) == pytest.approx(2.0, abs=1e-9)
    assert np.linalg.norm(p.center - cam.center) == pytest.approx(0.2, abs=1e-9)


def test_perturb_zero_is_identity_and_negative_rejected():
    cam = ring_cameras(1)[0]
    p = perturb_camera(cam, 0, 0, 3)
    assert np.allclose(p.rotation, cam.rotation) and np.allclose(p.center, cam.center)
    with pytest.raises(ValueError):
        perturb_camera(cam, -1, 0, 0)


def test_interpolate_endpoints_and_midpoint():
    a, b = ring_cameras(4, radius=2.0)[:2]
    assert np.allclose(interpolate_cameras(a, b, 0).rotation, a.rotation)
    assert np.allclose(interpolate_cameras(a, b, 1).center, b.center)
    m = interpolate_cameras(a, b, 0.5)
    assert rotation_angle(a.rotation, m.rotation) == pytest.approx(rotation_angle(b.rotation, m.rotation), abs=1e-9)


def test_scene_extent():
    assert scene_extent(ring_cameras(6, radius=2.0)) == pytest.approx(2.2)


@pytest.fixture(scope="module")
def scene():
    rng = rng_stream(0, "ds")
    dense = object_scene(rng, 300)
    sparse = dense.subset(np.arange(0, 300, 5))
    return dense, sparse, ring_cameras(6, radius=4.0, height=1.0, width=32, img_height=32)


def test_make_samples_shapes_and_kinds(scene):
    dense, sparse, cams = scene
    s = make_samples(dense, sparse, cams, 3, 6, seed=1)
    assert len(s) == 6
    assert [x.meta["kind"] for x in s[:3]] == ["held_out"] * 3
    assert {x.meta["kind"] for x in s[3:]} <= {"interpolated", "perturbed"}
    for x in s:
        assert x.geo.shape == (4, 78) and x.context.shape == (3, CONTEXT_DIM)
        assert x.confidence.shape == (32, 32) and x.confidence_latent.shape == (4, 4)
        assert np.all(x.confidence >= 0)


def test_make_samples_deterministic(scene):
    dense, sparse, cams = scene
    a = make_samples(dense, sparse, cams, 3, 5, seed=7)
    b = make_samples(dense, sparse, cams, 3, 5, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.artifact.rgb, y.artifact.rgb) and x.meta == y.meta


def test_make_samples_rejects_too_few(scene):
    dense, sparse, cams = scene
    with pytest.raises(ValueError):
        make_samples(dense, sparse, cams[:2], 3, 2, seed=0)
    with pytest.raises(ValueError):
        make_samples(dense, sparse, cams, 3, 2, seed=0, context=np.zeros((2, CONTEXT_DIM)))


def test_write_read_dataset(tmp_path, scene):
    dense, sparse, cams = scene
    samples = make_samples(dense, sparse, cams, 3, 2, seed=2)
    manifest = write_dataset(tmp_path, samples)
    assert manifest.exists()
    names = sorted(p.name for p in (tmp_path / "sample_00000").iterdir())
    assert names == sorted(["render.png", "depth.pfm", "conf.pfm", "conf_latent.pfm", "context.f32", "geo.f32",
                            "clean.png", "clean_depth.pfm", "meta.json"])
    back = read_sample(tmp_path / "sample_00001")
    assert np.array_equal(back.geo, samples[1].geo)
    assert np.array_equal(back.confidence, samples[1].confidence.astype(np.float32))
    assert back.meta["M"] == 3
