import numpy as np
import pytest
import torch

from ship.encoders import ToyDualEncoder
from ship.protocols import ToyWorldConfig, build_toy_world


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_world(tmp_path_factory):
    return build_toy_world(ToyWorldConfig(), tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def enc64():
    return ToyDualEncoder(0, 8, 8, dtype=torch.float64)
