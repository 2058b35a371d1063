import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import solid_cloud
from sparsesplat.core import CameraView, GaussianCloud
from sparsesplat.render import (
    LOW_PASS, RasterConfig, confidence_from, confidence_map, enhancer_confidence,
    normalize_confidence_for_display, project_gaussian, rasterize, rasterize_naive,
)
from sparsesplat.synthetic import random_camera, random_cloud, rng_stream


def test_project_isotropic_on_axis(axis_camera):
    cloud = solid_cloud([0, 0, 1.0], [1, 0, 0], 0.5, 0.01)
    p = project_gaussian(cloud[0], axis_camera)
    assert np.allclose(p.mean2d, [16, 16])
    assert np.allclose(p.cov2d, np.diag([1 + LOW_PASS, 1 + LOW_PASS]))
    assert p.depth == pytest.approx(1.0)


def test_project_behind_camera_is_culled(axis_camera):
    assert project_gaussian(solid_cloud([0, 0, -1.0], [1, 0, 0], 0.5, 0.01)[0], axis_camera) is None


def test_project_focal_linearity():
    splat = solid_cloud([0.05, 0, 1.0], [1, 0, 0], 0.5, 0.01)[0]
    a = project_gaussian(splat, CameraView(64, 64, 100.0, 100.0, 32, 32))
    b = project_gaussian(splat, CameraView(64, 64, 200.0, 100.0, 32, 32))
    assert (b.mean2d[0] - 32) == pytest.approx(2 * (a.mean2d[0] - 32))


def test_empty_cloud_renders_background(axis_camera):
    cfg = RasterConfig(background=(0.2, 0.3, 0.4))
    r = rasterize(GaussianCloud.empty(), axis_camera, cfg)
    assert np.allclose(r.rgb, [0.2, 0.3, 0.4])
    assert np.all(r.transmittance == 1) and np.all(r.n_contrib == 0) and np.all(r.depth == 0)
    assert np.all(r.confidence == 0)


def test_single_term_compositing(axis_camera):
    r = rasterize(solid_cloud([0, 0, 1.0], [1, 0, 0], 0.5, 0.01), axis_camera)
    assert np.allclose(r.rgb[16, 16], [0.5, 0, 0])
    assert r.transmittance[16, 16] == pytest.approx(0.5)
    assert r.n_contrib[16, 16] == 1


def test_two_term_compositing(axis_camera):
    # sigma scales with depth so both project to the same footprint
    cloud = solid_cloud([0, 0, 1.0], [1, 0, 0], 0.5, 0.01).concat(solid_cloud([0, 0, 2.0], [1, 0, 0], 0.5, 0.02))
    r = rasterize(cloud, axis_camera)
    assert np.allclose(r.rgb[16, 16], [0.75, 0, 0])
    assert r.transmittance[16, 16] == pytest.approx(0.25)
    assert r.depth[16, 16] == pytest.approx(4.0 / 3.0)
    assert r.n_contrib[16, 16] == 2


def test_confidence_spot_values():
    cfg = RasterConfig()
    assert confidence_from(np.array(1.0), np.array(0), cfg.epsilon) == 0
    assert confidence_from(np.array(0.5), np.array(1), cfg.epsilon) == pytest.approx(0.693145, abs=1e-6)
    assert confidence_from(np.array(0.25), np.array(2), cfg.epsilon) == pytest.approx(2.772581, abs=1e-6)


def test_confidence_map_stores_into_render(axis_camera):
    r = rasterize(solid_cloud([0, 0, 1.0], [1, 0, 0], 0.5, 0.01), axis_camera)
    r.confidence[:] = -1
    c = confidence_map(r)
    assert r.confidence is c or np.array_equal(r.confidence, c)
    assert c[16, 16] == pytest.approx(-np.log(0.5 + 1e-6))


# any contributor has alpha >= 1/255, so T <= 254/255 whenever n >= 1
@given(st.floats(1e-6, 254 / 255), st.integers(0, 50), st.integers(0, 50), st.floats(1e-6, 254 / 255))
def test_confidence_monotone(t, n1, n2, t2):
    eps = 1e-6
    lo, hi = sorted((n1, n2))
    assert confidence_from(np.array(t), np.array(lo), eps) <= confidence_from(np.array(t), np.array(hi), eps)
    ta, tb = sorted((t, t2))
    assert confidence_from(np.array(tb), np.array(n1), eps) <= confidence_from(np.array(ta), np.array(n1), eps)


def test_enhancer_small_beats_large():
    cam = CameraView(64, 32, 100.0, 100.0, 32.0, 16.0)
    cloud = solid_cloud([[-0.16, 0, 1.0], [0.16, 0, 1.0]], [1, 1, 1], 0.6, [[0.005], [0.03]])
    r = rasterize(cloud, cam)
    e = enhancer_confidence(r, cloud, cam)
    assert e[0, 32] == 0 and r.n_contrib[0, 32] == 0
    assert 0 < e[16, 48] < e[16, 16]


def test_enhancer_is_inverse_footprint_area(axis_camera):
    # a lone splat scores exactly 1/area at every covered pixel, so a 4x area means a 4x lower score
    scores = []
    for sigma in (0.01, 0.02):
        cloud = solid_cloud([0, 0, 1.0], [1, 1, 1], 0.6, sigma)
        p = project_gaussian(cloud[0], axis_camera)
        area = np.pi * np.sqrt(np.linalg.det(p.cov2d))
        e = enhancer_confidence(rasterize(cloud, axis_camera), cloud, axis_camera)
        assert e[16, 16] == pytest.approx(1 / area)
        scores.append((e[16, 16], area))
    ratio_area = scores[1][1] / scores[0][1]
    assert scores[0][0] / scores[1][0] == pytest.approx(ratio_area)


def test_normalize_for_display():
    assert np.all(normalize_confidence_for_display(np.zeros((4, 4))) == 0)
    assert np.all(normalize_confidence_for_display(np.full((4, 4), 5.0)) == 1)
    m = np.arange(101, dtype=float)
    out = normalize_confidence_for_display(m)
    assert out[99] == pytest.approx(1.0)
    assert out.max() <= 1 and out.min() >= 0


@pytest.mark.parametrize("seed", range(8))
def test_compositing_invariants(seed):
    rng = rng_stream(seed, "render-invariants")
    cloud = random_cloud(rng, int(rng.integers(1, 200)))
    cam = random_camera(rng, 64, 64)
    r = rasterize(cloud, cam)
    assert np.abs(r.accum_alpha + r.transmittance - 1).max() < 1e-6
    assert np.array_equal(r.confidence == 0, r.n_contrib == 0)
    assert np.all(r.transmittance > 0) and np.all(r.transmittance <= 1)


@pytest.mark.parametrize("seed", range(5))
def test_adding_a_gaussian_never_increases_transmittance(seed):
    rng = rng_stream(seed, "monotone")
    cloud = random_cloud(rng, 40)
    cam = random_camera(rng, 48, 48)
    base = rasterize(cloud, cam, RasterConfig(t_terminate=0.0)).transmittance
    more = rasterize(cloud.concat(random_cloud(rng, 1)), cam, RasterConfig(t_terminate=0.0)).transmittance
    assert np.all(more <= base + 1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_tiled_matches_naive_oracle(seed):
    rng = rng_stream(seed, "oracle")
    cloud = random_cloud(rng, int(rng.integers(1, 50)), sh_degree=int(rng.choice([0, 3])))
    cam = random_camera(rng, 40, 36)
    cfg = RasterConfig(t_terminate=0.0)
    a, b = rasterize(cloud, cam, cfg), rasterize_naive(cloud, cam, cfg)
    for f in ("rgb", "depth", "transmittance"):
        assert np.abs(getattr(a, f) - getattr(b, f)).max() < 1e-5
    assert np.array_equal(a.n_contrib, b.n_contrib)


def test_naive_flag_routes_to_oracle():
    rng = rng_stream(0, "flag")
    cloud, cam = random_cloud(rng, 10), random_camera(rng)
    r = rasterize(cloud, cam, RasterConfig(naive=True))
    assert np.array_equal(r.rgb, rasterize_naive(cloud, cam).rgb)


def test_single_gaussian_depth_is_its_z():
    cam = CameraView(32, 32, 40.0, 40.0, 16.0, 16.0)
    cloud = solid_cloud([0.1, -0.05, 3.0], [1, 1, 1], 0.7, 0.2)
    r = rasterize(cloud, cam)
    m = r.accum_alpha > 1e-6
    assert m.any()
    assert np.allclose(r.depth[m], 3.0)


def test_raster_config_validation():
    for kw in ({"epsilon": 0}, {"alpha_min": 1.0}, {"t_terminate": 1.0}):
        with pytest.raises(ValueError):
            RasterConfig(**kw)
