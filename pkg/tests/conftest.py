import numpy as np
import pytest

from splatstream.datasets import default_room_scene, generate
from splatstream.geometry import CameraIntrinsics


@pytest.fixture(scope="session")
def room_frames_small():
    """20-frame 128x128 orbit of the default room (shared across modules)."""
    scene = default_room_scene(frames=20, resolution=128, seed=0)
    return scene, generate(scene)


@pytest.fixture(scope="session")
def room_frames_overlap():
    """Slow 3-degree-per-frame orbit: high co-visibility between neighbors."""
    scene = default_room_scene(frames=20, resolution=128, seed=0, span_deg=60.0)
    return scene, generate(scene)


@pytest.fixture(scope="session")
def room_frames_full():
    """60-frame 256x256 orbit of the default room (acceptance-scale)."""
    scene = default_room_scene(frames=60, resolution=256, seed=0)
    return scene, generate(scene)


@pytest.fixture
def simple_K():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0,
                            width=100, height=100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
