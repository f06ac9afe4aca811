import numpy as np
import pytest
import torch

from dhoi.backbone import MockBackbone, MockBackboneConfig, NoiseSchedule

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def backbone():
    cfg = MockBackboneConfig(dtype=torch.float64)
    return MockBackbone(cfg, seed=1)


@pytest.fixture(scope="session")
def small_backbone():
    cfg = MockBackboneConfig(dtype=torch.float64, text_dim=6, latent_channels=2,
                             widths=(4, 6, 8, 10), fpn_channels=8,
                             encoder_hidden=4)
    return MockBackbone(cfg, seed=7)


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule.linear_beta(1000, dtype=torch.float64)


@pytest.fixture(scope="session")
def unit_sched():
    return NoiseSchedule.identity(1000, dtype=torch.float64)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def random_image(rng, size=128):
    return rng.random((size, size, 3))


@pytest.fixture()
def image(rng):
    return random_image(rng)
