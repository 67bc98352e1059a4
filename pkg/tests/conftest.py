import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_limits = threadpool_limits(limits=1)


@pytest.fixture(scope="session")
def desk_cfg():
    from triground.model import default_config
    return default_config()


@pytest.fixture(scope="session")
def scene(desk_cfg):
    from triground.scenes import GenConfig, generate_scene
    return generate_scene(3, GenConfig.from_dict(desk_cfg["data"]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
