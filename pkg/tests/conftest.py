import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vpfuse import fixtures

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Four fixture frames plus a random weight bundle on disk."""
    root = tmp_path_factory.mktemp("data")
    ids = fixtures.write_dataset(root, n_frames=4, seed=1)
    fixtures.write_weights(root / "weights.bin", fixtures.make_weights(np.random.default_rng(1)))
    return root, ids


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
