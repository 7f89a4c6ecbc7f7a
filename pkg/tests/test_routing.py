import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gjnet import routing
from gjnet.errors import ConfigError, NotDoubleSemiStochastic, NotSubStochasticDual
from gjnet.routing import CountableChainSpec, RoutingMatrix

from conftest import random_open_matrix

UP = dict(up=0.3, down=0.7, exit_at_1=0.7)     # dual drifts upward: lambda*(1) = 4/7
DOWN = dict(up=0.7, down=0.3, exit_at_1=0.3)   # dual drifts down into absorption


def test_rejects_negative_and_superstochastic_rows():
    with pytest.raises(ValueError):
        RoutingMatrix(np.array([[-0.1, 0.5], [0.2, 0.2]]))
    with pytest.raises(ValueError):
        RoutingMatrix(np.array([[0.6, 0.5], [0.2, 0.2]]))


def test_exit_is_row_deficit(ref_P):
    np.testing.assert_allclose(ref_P.exit, [0.0, 0.4], atol=1e-15)


def test_from_rows_uses_one_based_labels():
    P = RoutingMatrix.from_rows(2, [[[1, 0.5], [2, 0.5]], [[1, 0.3], [2, 0.3]]])
    np.testing.assert_array_equal(P.dense(), [[0.5, 0.5], [0.3, 0.3]])


@pytest.mark.parametrize("P, ok, reason", [
    ([[0.5, 0.5], [0.3, 0.3]], True, None),
    ([[0.5, 0.5], [0.5, 0.5]], False, "exit"),
    ([[0.0, 1.0], [0.3, 0.3]], False, "positive"),
])
def test_validate_open(P, ok, reason):
    rep = routing.validate_open(RoutingMatrix(np.array(P)))
    assert rep.passed is ok
    if reason:
        assert any(reason in f for f in rep.failures)


@pytest.mark.parametrize("n, c", [(1, 1.0), (2, 0.8)])
def test_contraction_coefficient_reference(ref_P, n, c):
    assert routing.contraction_coefficient(ref_P, n) == pytest.approx(c, abs=1e-14)


def test_contraction_of_zero_matrix():
    assert routing.contraction_coefficient(RoutingMatrix(np.zeros((3, 3))), 4) == 0.0


def test_dual_of_reference(ref_P):
    D = routing.dual_chain(ref_P)
    np.testing.assert_array_equal(D.dense(), [[0.5, 0.3], [0.5, 0.3]])
    np.testing.assert_allclose(D.exit, [0.2, 0.2], atol=1e-15)


def test_dual_of_banded_chain_swaps_up_and_down():
    D = routing.dual_chain(CountableChainSpec.banded(**UP))
    assert dict(D.row(5)) == pytest.approx({6: 0.7, 4: 0.3})
    row1 = dict(D.row(1))
    assert row1[2] == pytest.approx(0.7)
    assert 1 - sum(row1.values()) == pytest.approx(0.3)


def test_dual_rejects_heavy_column():
    with pytest.raises(NotSubStochasticDual):
        routing.dual_chain(RoutingMatrix(np.array([[0.75, 0.0], [0.75, 0.0]])))


@pytest.mark.parametrize("P, ok", [
    ([[0.5, 0.5], [0.3, 0.3]], True),
    ([[0.9, 0.0], [0.9, 0.0]], False),
    ([[0.0, 0.0], [0.0, 0.0]], True),
])
def test_double_semi_stochastic(P, ok):
    assert routing.is_double_semi_stochastic(RoutingMatrix(np.array(P))) is ok


def test_survival_iterates_reference(ref_P):
    it = routing.survival_iterate(ref_P, tol=1e-12)
    np.testing.assert_allclose(it[1].values, [0.8, 0.8], atol=1e-15)
    np.testing.assert_allclose(it[2].values, [0.64, 0.64], atol=1e-15)
    assert np.all(it[-1].values < 1e-10)


def test_survival_of_zero_and_stochastic_matrices():
    assert np.all(routing.survival_iterate(RoutingMatrix(np.zeros((2, 2))))[1].values == 0)
    it = routing.survival_iterate(RoutingMatrix(np.array([[0.5, 0.5], [0.5, 0.5]])), n_max=50)
    assert all(np.all(sv.values == 1.0) for sv in it)


def test_lambda_star_gamblers_ruin_oracle():
    res = routing.lambda_star(CountableChainSpec.banded(**UP), [500])
    assert res.final[0] == pytest.approx(4 / 7, abs=0.01)
    assert res.verdicts[0] == "positive"


def test_lambda_star_downward_chain_is_zero():
    res = routing.lambda_star(CountableChainSpec.banded(**DOWN), [200, 500])
    assert res.final[: res.monitored].max() < 1e-6
    assert set(res.verdicts) == {"zero"}


def test_lambda_star_finite_reference(ref_P):
    np.testing.assert_allclose(routing.lambda_star(ref_P).final, [0.0, 0.0], atol=1e-9)


def test_lambda_star_needs_column_sums_at_most_one():
    with pytest.raises(NotDoubleSemiStochastic):
        routing.lambda_star(RoutingMatrix(np.array([[0.9, 0.0], [0.9, 0.0]])))


def test_transience_verdicts():
    down = routing.transience_verdict(CountableChainSpec.banded(**DOWN), [200])
    assert (down.zero_only_invariant, down.theorem_used) == ("yes", "theorem3")
    up = routing.transience_verdict(CountableChainSpec.banded(**UP), [500])
    assert up.zero_only_invariant == "no"


def test_non_summable_columns_are_inconclusive():
    # every state jumps back to 1 or 2: column 1 collects mass from all rows
    chain = CountableChainSpec(lambda i: [(1, 0.5), (2, 0.4)], truncation_level=100)
    assert routing.transience_verdict(chain).zero_only_invariant == "inconclusive"


def test_avoidance_trivial_sets(ref_P):
    assert routing.avoidance_probability(ref_P, [1, 2], 1, 100, 100).estimate == 0.0
    assert routing.avoidance_probability(ref_P, [], 1, 100, 100).estimate == 1.0


@pytest.mark.slow
def test_avoidance_matches_ruin_probability():
    Pstar = routing.dual_chain(CountableChainSpec.banded(**UP)).truncate()
    est = routing.avoidance_probability(Pstar, [1], 5, 10_000, 100_000, seed=3)
    assert abs(est.estimate - (1 - (3 / 7) ** 4)) < 3 * est.stderr + 1e-12


def test_chain_from_json_forms():
    P = routing.chain_from_json({"m": 2, "rows": [[[1, 0.5], [2, 0.5]], [[1, 0.3], [2, 0.3]]]})
    assert isinstance(P, RoutingMatrix)
    C = routing.chain_from_json({"kind": "banded", **UP, "truncation": 50})
    assert C.truncation_level == 50
    with pytest.raises(ConfigError):
        routing.chain_from_json({"kind": "spiral"})


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_survival_monotone_for_double_semi_stochastic(m, seed):
    rng = np.random.default_rng(seed)
    A = rng.random((m, m))
    A /= max(A.sum(axis=0).max(), A.sum(axis=1).max()) * rng.uniform(1.0, 1.5)
    P = RoutingMatrix(A)
    it = routing.survival_iterate(P, n_max=200, tol=0.0)
    for a, b in zip(it, it[1:]):
        assert np.all(b.values <= a.values)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_open_specs_contract(m, seed):
    P = RoutingMatrix(random_open_matrix(np.random.default_rng(seed), m))
    assert routing.validate_open(P).passed
    assert routing.contraction_coefficient(P, m) < 1
