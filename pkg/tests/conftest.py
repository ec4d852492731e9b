import numpy as np
import pytest
from scipy import ndimage

from nightstereo.config import RunConfig
from nightstereo.geometry import CalibrationSet
from nightstereo.scenegen import SceneSpec, TrajectorySpec, generate_sequence

TINY_W, TINY_H = 96, 64


@pytest.fixture(scope="session")
def tiny_calib():
    return CalibrationSet(fx=72.0, fy=72.0, cx=47.5, cy=31.5, width=TINY_W, height=TINY_H)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_calib):
    """Three-frame 96x64 dataset shared by the slower tests."""
    out = tmp_path_factory.mktemp("dataset")
    return generate_sequence(SceneSpec(), TrajectorySpec(frames=3), tiny_calib, out, seed=1)


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    return RunConfig.model_validate({
        "dataset": str(tiny_dataset),
        "output": str(tmp_path / "run"),
        "stereo": {"dmax": 16, "window": 5},
        "vo": {"dmax": 16, "max_keypoints": 100},
        "segment": {"max_frames": 3},
        "dataflow": {"width": TINY_W, "height": TINY_H, "max_inflight": 2},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_texture(rng):
    """Smooth random texture in [0.1, 0.9] with plenty of local structure."""
    def make(height, width, sigma=1.0):
        noise = ndimage.gaussian_filter(rng.random((height, width)), sigma)
        noise = (noise - noise.min()) / (noise.max() - noise.min())
        return 0.1 + 0.8 * noise
    return make
