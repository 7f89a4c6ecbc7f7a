import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gjnet import traffic
from gjnet.errors import Divergent
from gjnet.routing import RoutingMatrix

from conftest import random_open_matrix


def test_single_node_geometric_series():
    sol = traffic.solve_traffic([0.2], RoutingMatrix(np.array([[0.5]])))
    assert sol.vbar[0] == pytest.approx(0.4, abs=1e-12)


def test_reference_flows(ref_P):
    sol = traffic.solve_traffic([0.1, 0.1], ref_P)
    np.testing.assert_allclose(sol.vbar, [0.5, 0.5], atol=1e-12)
    assert sol.residual < 1e-12


def test_zero_input(ref_P):
    assert np.all(traffic.solve_traffic([0.0, 0.0], ref_P).vbar == 0)


def test_no_exit_diverges():
    with pytest.raises(Divergent):
        traffic.solve_traffic([0.1, 0.1], RoutingMatrix(np.array([[0.5, 0.5], [0.5, 0.5]])))


def test_underload_examples():
    rep = traffic.check_underload([0.5, 0.5], [1, 1])
    np.testing.assert_allclose(rep.rho, [0.5, 0.5])
    assert rep.underloaded
    edge = traffic.check_underload([0.5], [2])
    assert edge.rho[0] == 1.0 and not edge.underloaded
    assert edge.overloaded_types == [1]
    single = traffic.check_underload(traffic.solve_traffic([0.2], RoutingMatrix(np.array([[0.5]]))).vbar, [2])
    assert single.rho[0] == pytest.approx(0.2 * 2 / (1 - 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_series_matches_direct_solve(m, seed):
    rng = np.random.default_rng(seed)
    P = RoutingMatrix(random_open_matrix(rng, m))
    V = rng.random(m)
    sol = traffic.solve_traffic(V, P)
    np.testing.assert_allclose(sol.vbar, traffic.solve_traffic_direct(V, P), rtol=0, atol=1e-10)
    # the solution is a fixed point of Lambda = V + Lambda P
    np.testing.assert_allclose(sol.vbar, V + P.left(sol.vbar), atol=1e-10)
