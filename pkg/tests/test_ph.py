import numpy as np
import pytest

from gjnet import nlmp, ph
from gjnet.errors import EitherNotConverged, TooFewSamples, ZeroMean
from gjnet.network import NetworkSpec
from gjnet.routing import RoutingMatrix
from gjnet import service

from conftest import reference_spec


def test_dispersion_examples():
    rng = np.random.default_rng(0)
    assert ph.dispersion_index(rng.poisson(5, 10_000)) == pytest.approx(1.0, abs=0.05)
    assert ph.dispersion_index(np.full(100, 3)) == 0.0
    pairs = 2 * rng.poisson(2.5, 10_000)
    assert ph.dispersion_index(pairs) == pytest.approx(2.0, abs=0.1)
    with pytest.raises(ZeroMean):
        ph.dispersion_index(np.zeros(60))
    with pytest.raises(TooFewSamples):
        ph.dispersion_index(np.ones(10))


def test_ks_on_deterministic_gaps():
    res = ph.ks_exponential(np.ones(500))
    assert res.statistic > 0.4 and res.pvalue < 0.01


def test_ks_needs_samples():
    with pytest.raises(TooFewSamples):
        ph.ks_exponential(np.ones(10))


@pytest.mark.slow
def test_null_calibration():
    rng = np.random.default_rng(42)
    seeds = 500
    ks_reject = sum(ph.ks_exponential(rng.exponential(0.5, 2000)).pvalue < 0.01
                    for _ in range(seeds))
    z_reject = sum(abs(ph.flow_independence(rng.poisson(3, 400), rng.poisson(3, 400)).z)
                   > 2.5758 for _ in range(seeds))
    for rejects in (ks_reject, z_reject):
        assert 0.002 <= rejects / seeds <= 0.03


def test_correlation_of_stream_with_itself():
    x = np.random.default_rng(1).poisson(4, 300)
    assert ph.flow_independence(x, x).r == pytest.approx(1.0)


def test_pairwise_z_matches_single_pair():
    rng = np.random.default_rng(3)
    c = rng.poisson(3, size=(4, 200))
    pairs, r, z = ph.pairwise_flow_z(c)
    k = [tuple(p) for p in pairs].index((1, 3))
    single = ph.flow_independence(c[1], c[3])
    assert r[k] == pytest.approx(single.r) and z[k] == pytest.approx(single.z)


def test_compare_stationary_examples():
    geo = 0.5 * 0.5 ** np.arange(60)
    assert ph.compare_stationary(geo, geo) == 0.0
    point = np.zeros(60)
    point[0] = 1.0
    assert ph.compare_stationary(geo, point) == pytest.approx(0.5, abs=1e-4)


def test_compare_stationary_is_a_metric():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p, q, r = (x / x.sum() for x in rng.random((3, 30)))
        lump = 30
        d = lambda a, b: ph.compare_stationary(a, b, lump_at=lump)
        assert d(p, q) == pytest.approx(d(q, p))
        assert d(p, r) <= d(p, q) + d(q, r) + 1e-12
        assert 0 <= d(p, q) <= 1


def test_initial_state_independence_identical_traces():
    res = nlmp.integrate(reference_spec(), 300.0, dt=0.02)
    verdict = ph.initial_state_independence(res.trace, res.trace, warmup=100.0, tol=0.01)
    assert verdict.divergence == 0.0 and verdict.passed


def test_overloaded_network_does_not_converge():
    P = RoutingMatrix(np.array([[0.5, 0.5], [0.3, 0.3]]))
    exp1 = service.Exponential(1.0)
    spec = NetworkSpec(P, [0.24, 0.24], [exp1, exp1])
    a = nlmp.integrate(spec, 200.0, dt=0.02, overflow_bound=None)
    b = nlmp.integrate(spec, 200.0, dt=0.02, init=[5, 5], overflow_bound=None)
    with pytest.raises(EitherNotConverged):
        ph.initial_state_independence(a.trace, b.trace, warmup=100.0, tol=0.01)


def test_report_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    gaps = [rng.exponential(2.0, 500) for _ in range(3)]
    counts = rng.poisson(2, size=(3, 150))
    geo = 0.5 * 0.5 ** np.arange(40)
    rep = ph.weak_ph_report(gaps, counts, N=10, marginals=[geo], references=[geo])
    assert len(rep.ks) == 3 and len(rep.dispersion) == 3 and len(rep.correlations) == 3
    rep.write_json(tmp_path / "r.json")
    rep.write_summary_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("N,")
