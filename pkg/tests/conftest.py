import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rorkit.tensor import set_default_dtype

settings.register_profile("rorkit", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rorkit")


@pytest.fixture(autouse=True)
def _single_precision():
    set_default_dtype(np.float32)
    yield
    set_default_dtype(np.float32)
