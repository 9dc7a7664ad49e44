import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mapt.geometry import Pose
from mapt.synth import gen_scene


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(q, rng.normal(scale=t_scale, size=3))


@pytest.fixture(scope="session")
def small_scene():
    """4 views, 32x24, spheres + plane; shared read-only across tests."""
    _, sample = gen_scene(n_views=4, width=32, height=24, n_spheres=4, seed=101, plane=True)
    return sample


@pytest.fixture(scope="session")
def open_scene():
    """3 views, no plane, so sky pixels (invalid + ambiguous) exist."""
    _, sample = gen_scene(n_views=3, width=32, height=24, n_spheres=3, seed=202, plane=False)
    return sample
