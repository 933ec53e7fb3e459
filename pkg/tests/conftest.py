import os
import time

import pytest
from hypothesis import HealthCheck, settings

from bergman_lab.speclab import EigenCache, TorusSpec, solve_torus

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIT_PS = (8, 12, 16, 24, 32, 48)


@pytest.fixture(scope="session")
def eigen_cache(tmp_path_factory):
    root = os.environ.get("BERGMAN_LAB_CACHE") or tmp_path_factory.mktemp("eigen")
    return EigenCache(root)


@pytest.fixture(scope="session")
def torus_timings():
    """Wall-clock seconds of each torus solve (a cache hit shows up as a fast solve)."""
    return {}


@pytest.fixture(scope="session")
def torus_runs(eigen_cache, torus_timings):
    """Landau-gauge flat torus, d = 1, default grids, for every ``p`` of the fit protocol."""
    runs = {}
    for p in FIT_PS:
        start = time.perf_counter()
        runs[p] = solve_torus(TorusSpec(p=p), cache=eigen_cache)
        torus_timings[p] = time.perf_counter() - start
    return runs
