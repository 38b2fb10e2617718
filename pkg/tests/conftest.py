import numpy as np
import pytest

from app.models import CorruptionConfig, Hyperparams, TrainConfig
from app.services.dataset import build_dataset, make_synthetic_series


def loss_through(module, loss):
    """f(params) for grad_check: load the params into the module, then evaluate loss(module)"""
    def f(params):
        module.load_state(params)
        return loss(module)
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_series():
    return make_synthetic_series(hours=500, seed=0)


@pytest.fixture
def tiny_hp():
    return Hyperparams(num_layers=1, num_epochs=2, num_heads=2, model_dim=4, lookback=24, horizon=6,
                       hidden_dim=3, corruption=CorruptionConfig(mask_probability=0.1, seed=7), seed=3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=2, batch_size=16, pretrain_epochs=1, seed=5)


@pytest.fixture
def tiny_ds():
    return build_dataset(make_synthetic_series(hours=160, seed=2), lookback=24, horizon=6)
