import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loccontrol.kernel import build_kernel_cone
from loccontrol.multipliers import lambda_max_set
from loccontrol.scenario import builtin_scenario
from loccontrol.trajectory import linearize

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def _setup(name, N, items):
    sc = builtin_scenario(name, grid_n=N, **dict(items))
    lin = linearize(sc.system, sc.process)
    cone = lambda_max_set(sc.system, sc.process, lin=lin)
    kernel = build_kernel_cone(sc.system, sc.process, lin=lin)
    return sc, lin, cone, kernel


@pytest.fixture(scope="session")
def setup():
    """``setup(name, N=200, **params) -> (scenario, lin, cone, kernel)`` (cached)."""

    def get(name, N=200, **params):
        return _setup(name, N, tuple(sorted(params.items())))

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
