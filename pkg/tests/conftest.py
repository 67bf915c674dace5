import numpy as np
import pytest

from intuit3d.graph import GraphConfig, Material, ParticleState


def make_state(n_free=6, n_act=3, seed=0, rigid=0, spread=0.2, history=3):
    """Small mixed scene: fluid, an optional rigid group and actuated points with history."""
    rng = np.random.default_rng(seed)
    n = n_free + rigid + n_act
    pos = rng.uniform(-spread, spread, size=(n, 3))
    hist = np.zeros((n, history, 3))
    hist[n_free + rigid :] = rng.normal(scale=0.01, size=(n_act, history, 3))
    mats = [Material.FLUID] * n_free + [Material.RIGID] * rigid + [Material.ACTUATED] * n_act
    gids = [0] * n_free + [1] * rigid + [10] * n_act
    return ParticleState(pos, hist, np.array(mats), np.array(gids))


@pytest.fixture
def small_state():
    return make_state()


@pytest.fixture
def graph_config():
    return GraphConfig(delta=0.25)
