import sys

import numpy as np
import pytest

from sparsesplat import io
from sparsesplat.core import RgbdImage
from sparsesplat.refiners import (
    IdentityRefiner, OracleRefiner, RefinerError, RefinerResponse, RefinerTimeout, SubprocessRefiner, build_request,
    make_refiner, read_request, write_request,
)
from sparsesplat.render import confidence_map, rasterize
from sparsesplat.synthetic import object_scene, ring_cameras, rng_stream

COPY = [sys.executable, "-m", "sparsesplat.refiners", "copy"]


@pytest.fixture(scope="module")
def setup():
    cloud = object_scene(rng_stream(0, "ref"), 200)
    cams = ring_cameras(4, radius=4.0, height=1.0, width=24, img_height=24)
    out = rasterize(cloud, cams[3])
    confidence_map(out)
    return cloud, cams, build_request(out, cams[3], cams[:3], meta={"seed": 5})


def test_request_shapes(setup):
    _, _, req = setup
    assert req.M == 3 and req.geo.shape == (4, 78) and req.confidence_latent.shape == (3, 3)


def test_request_round_trip(tmp_path, setup):
    _, _, req = setup
    write_request(req, tmp_path)
    back = read_request(tmp_path)
    assert np.array_equal(back.geo, req.geo) and back.meta["seed"] == 5
    assert np.allclose(back.camera.rotation, req.camera.rotation)
    assert np.array_equal(back.render.depth, req.render.depth.astype(np.float32))


def test_copy_script_matches_identity(tmp_path, setup):
    _, _, req = setup
    ref = SubprocessRefiner(COPY, tmp_path)
    a = ref(req)
    b = IdentityRefiner()(req).quantized()
    assert a.refined.rgb.tobytes() == b.refined.rgb.tobytes()
    assert a.refined.depth.tobytes() == b.refined.depth.tobytes()
    assert list(tmp_path.iterdir()) == []  # cleaned up on success


def test_subprocess_oracle_matches_in_process(tmp_path, setup):
    cloud, _, req = setup
    io.write_ply(tmp_path / "ref.ply", cloud)
    ref_cloud = io.read_ply(tmp_path / "ref.ply")
    sub = SubprocessRefiner([sys.executable, "-m", "sparsesplat.refiners", "oracle", str(tmp_path / "ref.ply")], tmp_path / "w")
    a = sub(req)
    b = OracleRefiner(ref_cloud)(read_request(write_request(req, tmp_path / "r"))).quantized()
    assert np.array_equal(a.refined.rgb, b.refined.rgb)
    assert np.array_equal(a.refined.depth, b.refined.depth)


def test_missing_command_keeps_request(tmp_path, setup):
    _, _, req = setup
    with pytest.raises(RefinerError) as e:
        SubprocessRefiner(["/nonexistent/refiner-xyz"], tmp_path)(req)
    assert not isinstance(e.value, RefinerTimeout)
    kept = list(tmp_path.iterdir())
    assert len(kept) == 1 and (kept[0] / "meta.json").exists() and e.value.request_dir == str(kept[0])


def test_timeout(tmp_path, setup):
    _, _, req = setup
    with pytest.raises(RefinerTimeout):
        SubprocessRefiner([sys.executable, "-c", "import time; time.sleep(5)"], tmp_path, timeout=0.3)(req)


def test_failing_and_silent_programs(tmp_path, setup):
    _, _, req = setup
    with pytest.raises(RefinerError, match="status 3"):
        SubprocessRefiner([sys.executable, "-c", "import sys; sys.exit(3)"], tmp_path)(req)
    with pytest.raises(RefinerError, match="malformed"):
        SubprocessRefiner(["true"], tmp_path)(req)


def test_dimension_mismatch(setup):
    cloud, cams, req = setup
    small = cams[0].__class__(12, 12, 6.0, 6.0, 6.0, 6.0, cams[3].rotation, cams[3].translation)

    class Wrong:
        def __call__(self, r):
            return OracleRefiner(cloud)(type(r)(r.render, r.confidence, r.confidence_latent, r.context, r.geo, small))

    with pytest.raises(RefinerError):
        Wrong()(req)


def test_quantized_is_idempotent():
    r = RefinerResponse(RgbdImage(np.random.default_rng(0).uniform(size=(4, 4, 3)), np.linspace(1, 2, 16).reshape(4, 4)))
    q = r.quantized()
    assert np.array_equal(q.quantized().refined.rgb, q.refined.rgb)


def test_make_refiner(tmp_path, setup):
    cloud, _, _ = setup
    assert isinstance(make_refiner("identity"), IdentityRefiner)
    io.write_ply(tmp_path / "r.ply", cloud)
    assert isinstance(make_refiner(f"oracle:{tmp_path / 'r.ply'}"), OracleRefiner)
    assert isinstance(make_refiner("exec:true", workdir=tmp_path), SubprocessRefiner)
    with pytest.raises(ValueError):
        make_refiner("diffusion")
