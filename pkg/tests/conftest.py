import numpy as np
import pytest

from entroprune.model import ModelConfig, init_weights, load_params
from entroprune.reference import make_toy
from entroprune.weights import decode_archive, encode_archive


def toy_params(spec):
    return load_params(decode_archive(spec.archive_bytes()), spec.config)


def params_from(tensors, config):
    return load_params(decode_archive(encode_archive(tensors)), config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def deit_config():
    return ModelConfig()


@pytest.fixture(scope="session")
def deit_params(deit_config):
    return params_from(init_weights(deit_config, seed=0), deit_config)


@pytest.fixture
def toy():
    spec = make_toy(7, depth=4, num_heads=2, head_dim=3)
    return spec, toy_params(spec)
