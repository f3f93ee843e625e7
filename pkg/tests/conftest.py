import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metast.labels import LabelScheme

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def ab():
    return LabelScheme(("A", "B"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
