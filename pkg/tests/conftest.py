import numpy as np
import pytest

from advseg.network import init_model
from advseg.scenes import SceneSpec, source_domain_spec, synth_scene
from advseg.training import prepare_scene, pretrain


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """A 4000-point source scene, seeded."""
    return synth_scene(source_domain_spec(7, num_points=4000))


@pytest.fixture(scope="session")
def trained_model(small_scene):
    """A lightly pre-trained classifier over the small scene (shared,
    read-only; tests must not mutate it)."""
    scene = prepare_scene(small_scene)
    model = init_model(8, seed=0)
    return pretrain(model, [scene], loss="ce", steps=80, batch_points=2048,
                    seed=0).model
