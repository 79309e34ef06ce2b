import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mia.data import SceneConfig, build_vocab, generate_dataset  # noqa: E402
from mia.tensor import make_rng  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def overfit_scenes():
    """Four 49-row scenes, d_h=16: the desk-scale overfit dataset."""
    scenes = generate_dataset(SceneConfig(n_features=49, d_h=16, seed=1), 4)
    return scenes, build_vocab(scenes)


@pytest.fixture(scope="session")
def small_scenes():
    scenes = generate_dataset(SceneConfig(n_features=6, n_objects=(2, 3), d_h=8, seed=2), 3)
    return scenes, build_vocab(scenes)


def rand(rng, *shape):
    return np.asarray(rng.normal(size=shape))
