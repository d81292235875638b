import os

import pytest

from src.models.densities import GammaDensity, MixtureSpec, NormalDensity, PositiveTruncNormalDensity, sample_mixture
from src.models.schemas import MmConfig


def pytest_collection_modifyitems(config, items):
    if os.getenv("SMOOTHMIX_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="long replication run; set SMOOTHMIX_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def normal_gamma():
    """Positive-truncated Normal(6, 1) known, Gamma(2, 1) unknown, p = 0.6"""
    return MixtureSpec(p=0.6, known=PositiveTruncNormalDensity(mu=6.0, sigma=1.0), unknown=GammaDensity(alpha=2.0, beta=1.0))


@pytest.fixture
def normal_normal():
    return MixtureSpec(p=0.3, known=NormalDensity(mu=0.0, sigma=1.0), unknown=NormalDensity(mu=6.0, sigma=1.0))


@pytest.fixture
def small_sample(normal_gamma):
    return sample_mixture(normal_gamma, 200, seed=1)


@pytest.fixture
def mm_config():
    return MmConfig(bandwidth=0.6, p_init=0.2, f_init=GammaDensity(alpha=4.0, beta=2.0), tol=1e-6, max_iters=40)
