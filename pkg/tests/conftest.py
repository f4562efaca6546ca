import numpy as np
import pytest

from tissuesim.index import build_index
from tissuesim.sampler import SamplingParams, run_sampling
from tissuesim.surface import make_phantom


@pytest.fixture(scope="session")
def sphere():
    return make_phantom("sphere", 1.0, 3)


@pytest.fixture(scope="session")
def sphere_index(sphere):
    return build_index(sphere)


@pytest.fixture(scope="session")
def cube():
    return make_phantom("box", 1.0, 0)


@pytest.fixture(scope="session")
def small_relax(sphere_index):
    """A converged 300-particle sphere sampling, shared by the cheaper tests."""
    return run_sampling(sphere_index, SamplingParams(N=300, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_relax():
    """30 particles in a sphere: 24 on the surface, 6 free inside."""
    ix = build_index(make_phantom("sphere", 1.0, 3))
    return run_sampling(ix, SamplingParams(N=30, seed=1))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
