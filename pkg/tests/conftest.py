import numpy as np
import pytest
import torch

from oodsim.data import DataBundle, normalize
from oodsim.synth import SynthConfig, synth_generate

torch.set_num_threads(1)


def make_bundle(world, train_months=("2019-01", "2022-12")) -> DataBundle:
    panel_norm, stats = normalize(world.panel, train_months=train_months)
    return DataBundle(
        panel=world.panel,
        panel_norm=panel_norm,
        stats=stats,
        graph=world.graph,
        corpus=world.corpus,
        entities=world.entities,
    )


@pytest.fixture(scope="session")
def world():
    return synth_generate(7)


@pytest.fixture(scope="session")
def bundle(world):
    return make_bundle(world)


@pytest.fixture(scope="session")
def small_world():
    """Tiny world for fast model-level tests."""
    return synth_generate(
        11, SynthConfig(num_states=4, num_months=30, grid_cols=2, policy_rate=0.12)
    )


@pytest.fixture(scope="session")
def small_bundle(small_world):
    return make_bundle(small_world, train_months=("2019-01", "2020-12"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
