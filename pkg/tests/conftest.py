import numpy as np
import pytest

from field_engine.scene import Camera, VoxelField
from services.loopback_server import serve_in_background
from services.synth_service import CameraRig, SceneSpec, build_datasets


def small_spec(**overrides) -> SceneSpec:
    """The default scene at test size: coarse grid, tiny images, few cameras."""
    params = dict(
        resolution=(24, 24, 24),
        width=16,
        height=16,
        cameras=CameraRig(count=8),
        samples_per_ray=48,
    )
    params.update(overrides)
    return SceneSpec(**params)


@pytest.fixture(scope="session")
def scene():
    fields, datasets = build_datasets(small_spec(), seed=0)
    return {"spec": small_spec(), "fields": fields, "datasets": datasets}


@pytest.fixture(scope="session")
def full_scene():
    """The default scene at its real size, for the slow quality gates."""
    spec = SceneSpec()
    fields, datasets = build_datasets(spec, seed=0)
    return {"spec": spec, "fields": fields, "datasets": datasets}


@pytest.fixture
def front_camera():
    """16x16 camera at (0, 0, -3) looking along +z (identity rotation)."""
    pose = np.eye(4)
    pose[:3, 3] = (0.0, 0.0, -3.0)
    return Camera(fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16, cam_to_world=pose)


@pytest.fixture
def unit_bounds():
    return np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])


def random_field(rng, resolution=(4, 4, 4), low=0.5, high=3.0) -> VoxelField:
    return VoxelField(
        density=rng.uniform(low, high, resolution),
        color=rng.uniform(0.2, 0.8, tuple(resolution) + (3,)),
        bounds_min=(-1.0, -1.0, -1.0),
        bounds_max=(1.0, 1.0, 1.0),
    )


@pytest.fixture(scope="session")
def loopback():
    server = serve_in_background()
    yield server
    server.shutdown()
