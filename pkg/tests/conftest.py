import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from meatkit.correspondence import CorrespondenceTable
from meatkit.geometry import Camera


@pytest.fixture
def unit_camera():
    """1024x1024 camera at the origin looking along +z, f = 1000."""
    return Camera(
        K=[[1000.0, 0.0, 512.0], [0.0, 1000.0, 512.0], [0.0, 0.0, 1.0]],
        R=np.eye(3),
        T=[0.0, 0.0, 0.0],
        width=1024,
        height=1024,
    )


def random_camera(rng, width=640, height=480, distance=(2.0, 6.0)):
    """Random valid perspective camera looking roughly at the origin."""
    from meatkit.geometry import camera_from_lookat

    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-0.8, 0.8)
    r = rng.uniform(*distance)
    eye = r * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    fov = rng.uniform(0.4, 1.2)
    return camera_from_lookat(eye, rng.normal(0, 0.1, 3), fov, width, height)


def random_table(rng, n_views, size, mask_prob=0.7, valid_prob=0.8):
    """Random in-bounds correspondence table for fusion tests."""
    mask = rng.random((n_views, size, size)) < mask_prob
    valid = rng.random((n_views, size, size, n_views, 4)) < valid_prob
    valid &= mask[:, :, :, None, None]
    idx = rng.integers(0, size, size=(n_views, size, size, n_views, 4, 2)).astype(np.int32)
    idx[~valid] = 0
    return CorrespondenceTable(
        n_views=n_views, feature_width=size, feature_height=size, indices=idx, valid=valid, mask=mask
    )
