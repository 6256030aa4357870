import numpy as np
import pytest

from interaction_flows.errors import ConfigurationError, UnsupportedError
from interaction_flows.gamma import (
    EmpiricalMeasure,
    bounded_cost,
    gamma_bruteforce,
    gamma_empirical,
    gamma_to_dirac,
    optimal_matching,
)


def test_identical_measures_are_at_distance_zero():
    atoms = np.random.default_rng(0).standard_normal((6, 2))
    assert gamma_empirical(atoms, atoms[::-1]) == 0.0


def test_concave_cost_prefers_crossing_match():
    # sorted matching pays 1/2, the crossing one 1/3
    matching = optimal_matching([0.0, 1.0], [1.0, 2.0])
    assert matching.distance == pytest.approx(1.0 / 3.0)
    assert matching.pairs.tolist() == [1, 0]
    np.testing.assert_allclose(matching.costs, [2.0 / 3.0, 0.0])


def test_assignment_agrees_with_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        M, d = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        mu, nu = rng.standard_normal((M, d)), rng.standard_normal((M, d))
        assert gamma_empirical(mu, nu) == pytest.approx(gamma_bruteforce(mu, nu), abs=1e-12)


def test_metric_properties():
    rng = np.random.default_rng(11)
    for _ in range(100):
        M, d = int(rng.integers(1, 10)), int(rng.integers(1, 4))
        mu, nu, eta = (rng.uniform(-2, 2, (M, d)) for _ in range(3))
        forward = gamma_empirical(mu, nu)
        assert forward == pytest.approx(gamma_empirical(nu, mu), abs=1e-12)
        assert gamma_empirical(mu, eta) <= forward + gamma_empirical(nu, eta) + 1e-12
        assert 0.0 < forward < 1.0


def test_two_atom_example():
    # Both matchings cost 1/2 + 2/3
    mu, nu = [[0.0], [0.0]], [[1.0], [2.0]]
    assert gamma_empirical(mu, nu) == pytest.approx(7.0 / 12.0, abs=1e-12)
    assert gamma_bruteforce(mu, nu) == pytest.approx(7.0 / 12.0, abs=1e-12)
    assert gamma_to_dirac(nu, [0.0]) == pytest.approx(7.0 / 12.0, abs=1e-12)


def test_dirac_distance_matches_repeated_atoms():
    rng = np.random.default_rng(5)
    for M in (1, 3, 6):
        mu, y = rng.standard_normal((M, 2)), rng.standard_normal(2)
        repeated = np.tile(y, (M, 1))
        assert gamma_to_dirac(mu, y) == pytest.approx(gamma_empirical(mu, repeated), abs=1e-12)


def test_distance_to_dirac():
    assert gamma_to_dirac([[0.0], [2.0]], [1.0]) == pytest.approx(0.5)
    assert gamma_to_dirac(EmpiricalMeasure([[1.0, 1.0]]), [1.0, 1.0]) == 0.0
    assert bounded_cost(3.0) == pytest.approx(0.75)


def test_unsupported_inputs():
    with pytest.raises(UnsupportedError):
        gamma_empirical([[0.0], [1.0]], [[0.0]])
    with pytest.raises(UnsupportedError):
        gamma_bruteforce(np.zeros((9, 1)), np.ones((9, 1)))
    with pytest.raises(ConfigurationError):
        gamma_empirical([[0.0, 0.0]], [[0.0]])
    with pytest.raises(ConfigurationError):
        EmpiricalMeasure([[np.nan]])
