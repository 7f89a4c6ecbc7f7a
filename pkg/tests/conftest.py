import numpy as np
import pytest

from gjnet import service
from gjnet.network import NetworkSpec
from gjnet.routing import RoutingMatrix

REF_P = [[0.5, 0.5], [0.3, 0.3]]
REF_V = [0.1, 0.1]


def random_open_matrix(rng, m):
    """All-positive sub-stochastic matrix with at least one row leaking mass."""
    A = rng.random((m, m)) + 1e-3
    sums = rng.uniform(0.2, 1.0, size=m)
    sums[rng.integers(m)] = rng.uniform(0.1, 0.95)
    return A * (sums / A.sum(axis=1))[:, None]


def reference_spec(N=1, **kw):
    exp1 = service.Exponential(1.0)
    return NetworkSpec(RoutingMatrix(np.array(REF_P)), REF_V, [exp1, exp1], N=N, **kw)


@pytest.fixture
def ref_P():
    return RoutingMatrix(np.array(REF_P))


@pytest.fixture
def ref_spec():
    return reference_spec()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
