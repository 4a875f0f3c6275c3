import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from transqr.core import Role, Study

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_study(n, p, seed, id="target", role=Role.TARGET, beta=None, noise=1.0, intercept=False):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if intercept:
        X[:, 0] = 1.0
    b = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    y = X @ b + noise * rng.standard_normal(n)
    return Study(id, X, y, role)


@pytest.fixture
def small_study():
    return make_study(40, 3, 0, beta=[1.0, -0.5, 0.0])
