import numpy as np
import pytest
from hypothesis import settings

from sparsesplat.core import SH_C0, CameraView, GaussianCloud, inverse_sigmoid

settings.register_profile("pkg", deadline=None, max_examples=40)
settings.load_profile("pkg")


def solid_cloud(positions, colors, opacity, sigma, sh_degree=0):
    """Isotropic splats with exact colors (valid for colors in [0, 1])."""
    pos = np.atleast_2d(np.asarray(positions, float))
    n = len(pos)
    col = np.broadcast_to(np.asarray(colors, float), (n, 3))
    sh = np.zeros((n, 3, (sh_degree + 1) ** 2))
    sh[:, :, 0] = (col - 0.5) / SH_C0
    return GaussianCloud(
        pos, np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), np.log(sigma)),
        np.full(n, inverse_sigmoid(opacity)), sh, sh_degree,
    )


@pytest.fixture
def axis_camera():
    # pixel (16, 16) has its center exactly on the optical axis
    return CameraView(32, 32, 100.0, 100.0, 16.0, 16.0)
