import numpy as np
import pytest

from morphfill.pipeline import PipelineConfig, default_model


@pytest.fixture(scope="session")
def config():
    return PipelineConfig()


@pytest.fixture(scope="session")
def model(config):
    return default_model(config)


@pytest.fixture(scope="session")
def dataset16(model, config):
    from morphfill.pipeline import make_dataset
    return make_dataset(model, config, 16, seed=2024)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
