import numpy as np
import pytest

from hgnn.episodes import SyntheticConfig, generate_synthetic_pool, task_episode
from hgnn.models import HGNNModel, ModelConfig


@pytest.fixture(scope="session")
def small_store():
    cfg = SyntheticConfig(n_train_classes=10, n_val_classes=4, n_test_classes=6,
                          records_per_class=30, dim=8, seed=3)
    return generate_synthetic_pool(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_episode(small_store):
    return task_episode(small_store, 3, 2, 3, seed=0, task=0)


@pytest.fixture
def tiny_hgnn():
    return HGNNModel.create(ModelConfig(d_in=8), seed=5)
