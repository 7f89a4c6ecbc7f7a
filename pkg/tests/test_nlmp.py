import numpy as np
import pytest

from gjnet import nlmp, service, traffic
from gjnet.errors import MassLoss, NotConverged, Overloaded
from gjnet.network import NetworkSpec
from gjnet.nlmp import NodeMeasure, ServiceGrid
from gjnet.rates import RateTrace
from gjnet.routing import RoutingMatrix

from conftest import reference_spec

EXP1 = service.Exponential(1.0)


def grid_for(dist, dt):
    return ServiceGrid.build(dist, dt)


def test_empty_measure_without_input_is_fixed():
    g = grid_for(EXP1, 0.01)
    meas = NodeMeasure.empty(50, g.K, 0.01)
    out, b = nlmp.step([meas], [0.0], 0.01, [g])
    assert b[0] == 0.0 and out[0].p_empty == 1.0 and out[0].grid.sum() == 0.0


def test_single_customer_completion_rate():
    dt = 0.01
    g = grid_for(EXP1, dt)
    meas = NodeMeasure.point(1, 50, g.K, dt)
    out, b = nlmp.step([meas], [0.0], dt, [g])
    done = -np.expm1(-dt)
    assert b[0] == pytest.approx(1.0, abs=dt)
    assert out[0].p_empty == pytest.approx(done, rel=1e-12)


def test_step_conserves_mass():
    dt = 0.02
    g = grid_for(service.Gamma(2, 0.5), dt)
    meas = NodeMeasure.from_queue_lengths({0: 0.2, 1: 0.3, 4: 0.5}, 60, g.K, dt, tau=0.3)
    for _ in range(200):
        (meas,), _ = nlmp.step([meas], [0.7], dt, [g])
    assert meas.total_mass == pytest.approx(1.0, abs=1e-12)
    assert np.all(meas.grid >= 0)


def test_step_rejects_steps_longer_than_grid():
    g = grid_for(EXP1, 0.01)
    with pytest.raises(ValueError):
        nlmp.step([NodeMeasure.empty(5, g.K, 0.01)], [0.1], 0.02, [g])


def test_exponential_tail_collapses_to_one_cell():
    assert grid_for(EXP1, 0.005).K == 1
    assert grid_for(service.Gamma(2, 0.5), 0.01).K > 100


def test_mm1_idle_probability():
    res = nlmp.integrate(
        NetworkSpec(RoutingMatrix(np.array([[0.0]])), [0.5], [EXP1], force_open=True), 200.0)
    assert res.measures[0].p_empty == pytest.approx(0.5, abs=0.01)


def test_no_input_no_flow(ref_P):
    res = nlmp.integrate(NetworkSpec(ref_P, [0.0, 0.0], [EXP1, EXP1]), 20.0, dt=0.05)
    assert np.all(res.trace.lam == 0) and np.all(res.trace.b == 0)


def test_open_balance_identity_holds_exactly():
    spec = reference_spec()
    res = nlmp.integrate(spec, 50.0, dt=0.01)
    tr = res.trace
    np.testing.assert_allclose(tr.lam, spec.V[:, None] + spec.P.dense().T @ tr.b, rtol=0, atol=1e-12)


def test_reference_network_flattens_to_traffic_solution():
    spec = reference_spec()
    res = nlmp.integrate(spec, 300.0, dt=0.01)
    flat = nlmp.detect_flattening(res.trace, 50.0, 1e-4)
    vbar = traffic.solve_traffic(spec.V, spec.P).vbar
    np.testing.assert_allclose(flat.lambda_hat, vbar, rtol=0.01)
    np.testing.assert_allclose(flat.b_hat, vbar, rtol=0.01)


def test_closed_network_conserves_customers():
    P = RoutingMatrix(np.array([[0.3, 0.7], [0.6, 0.4]]))
    spec = NetworkSpec(P, [0, 0], [service.Gamma(2, 0.5), EXP1], mode="closed", K=8, N=2)
    res = nlmp.integrate(spec, 100.0, dt=0.02)
    assert res.mean_customers[0] == pytest.approx(4.0)
    assert abs(res.mean_customers[-1] - res.mean_customers[0]) <= 0.005 * res.mean_customers[0]


def test_flattening_detection():
    t = np.linspace(0, 100, 1001)
    const = RateTrace(t, np.full((1, t.size), 0.3), np.full((1, t.size), 0.3))
    flat = nlmp.detect_flattening(const, 10.0, 1e-6)
    assert flat.lambda_hat[0] == pytest.approx(0.3)
    wavy = RateTrace(t, 0.5 + 0.05 * np.sin(t)[None], np.full((1, t.size), 0.5))
    with pytest.raises(NotConverged) as err:
        nlmp.detect_flattening(wavy, 10.0, 0.01)
    assert err.value.oscillation.max() == pytest.approx(0.1, rel=0.02)
    with pytest.raises(ValueError):
        nlmp.detect_flattening(const, 60.0, 0.01)


def test_stationary_single_node_geometric():
    nu = nlmp.stationary_single_node(0.5, EXP1)
    np.testing.assert_allclose(nu[:30], 0.5 * 0.5 ** np.arange(30), atol=0.01)
    assert 0.5 * np.abs(nu - 0.5 * 0.5 ** np.arange(nu.size)).sum() < 0.01


def test_stationary_single_node_edge_cases():
    nu = nlmp.stationary_single_node(0.0, EXP1)
    assert nu[0] == 1.0 and nu[1:].sum() == 0.0
    with pytest.raises(Overloaded):
        nlmp.stationary_single_node(1.0, EXP1)


def test_gamma_idle_probability_is_one_minus_load():
    nu = nlmp.stationary_single_node(0.5, service.Gamma(2, 0.5), dt=0.02)
    assert nu[0] == pytest.approx(0.5, abs=0.01)


def test_expected_service_time_examples():
    g = grid_for(service.Exponential(0.5), 0.01)
    assert nlmp.expected_service_time(NodeMeasure.empty(10, g.K, 0.01), service.Exponential(0.5)) == 0.0
    m3 = NodeMeasure.point(3, 10, g.K, 0.01, tau=1.7)
    assert nlmp.expected_service_time(m3, service.Exponential(0.5)) == pytest.approx(6.0, abs=1e-6)
    gg = grid_for(service.Gamma(2, 1), 0.05)
    m2 = NodeMeasure.point(2, 10, gg.K, 0.05)
    assert nlmp.expected_service_time(m2, service.Gamma(2, 1)) == pytest.approx(4.0, abs=1e-6)


def test_mean_customers_examples():
    assert nlmp.mean_customers(NodeMeasure.empty(10, 1, 0.01)) == 0.0
    assert nlmp.mean_customers(NodeMeasure.point(5, 10, 3, 0.01, tau=0.02)) == 5.0
    res = nlmp.integrate(
        NetworkSpec(RoutingMatrix(np.array([[0.0]])), [0.5], [EXP1], force_open=True), 200.0)
    assert nlmp.mean_customers(res.measures[0]) == pytest.approx(1.0, abs=0.02)


def test_measures_csv(tmp_path):
    res = nlmp.integrate(reference_spec(), 5.0, dt=0.05)
    path = tmp_path / "m.csv"
    res.write_measures_csv(path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    for i in (1, 2):
        assert rows[rows[:, 0] == i, 3].sum() == pytest.approx(1.0, abs=1e-9)


def test_mass_loss_is_reported():
    g = grid_for(EXP1, 0.01)
    bad = NodeMeasure.from_queue_lengths({0: 1.0}, 10, g.K, 0.01)
    bad.p_empty = 1.01
    with pytest.raises(MassLoss):
        nlmp.integrate(reference_spec(), 2.0, dt=0.01, n_max=10, init=[bad, None])
    with pytest.raises(ValueError):
        nlmp.integrate(reference_spec(), 2.0, dt=0.01, n_max=20, init=[bad, None])
