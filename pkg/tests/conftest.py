import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wgmlab.models import make_oracle
from wgmlab.symbolic import SymbolicModel

settings.register_profile("wgm", deadline=None, max_examples=60, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wgm")


@pytest.fixture(scope="session")
def o1():
    return make_oracle("oracle-o1")


@pytest.fixture(scope="session")
def o2():
    return make_oracle("oracle-o2")


def random_model(rng, n=None, full=False):
    """Random finite model whose images all contain symbols 0 and 1."""
    n = n or int(rng.integers(2, 6))
    images = []
    for _ in range(n):
        extra = [j for j in range(2, n) if full or rng.uniform() < 0.5]
        images.append([0, 1] + extra)
    R = rng.integers(1, 5, n)
    R[0], R[1] = 1, 2
    m = rng.uniform(0.2, 1.0, n)
    return SymbolicModel(images=images, return_time=R, element_mass=m / m.sum(), beta=0.5)


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records one acceptance line, then asserts."""

    def record(k, ok, detail):
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[k] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
