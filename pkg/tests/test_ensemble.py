import numpy as np
import pytest

from interaction_flows.ensemble import ParticleEnsemble
from interaction_flows.errors import ConfigurationError, PreconditionError


def test_flat_positions_are_particles_on_the_line():
    ensemble = ParticleEnsemble([0.0, 1.0, 2.0, 5.0])
    assert ensemble.n == 4
    assert ensemble.d == 1
    np.testing.assert_allclose(ensemble.mean, [2.0])


def test_mean_of_planar_ensemble():
    ensemble = ParticleEnsemble([[0.0, 0.0], [2.0, 4.0]])
    np.testing.assert_allclose(ensemble.mean, [1.0, 2.0])


def test_positions_are_read_only():
    ensemble = ParticleEnsemble([[0.0, 1.0]])
    with pytest.raises(ValueError):
        ensemble.positions[0, 0] = 3.0


def test_empty_ensemble_is_rejected():
    with pytest.raises(PreconditionError):
        ParticleEnsemble(np.zeros((0, 2)))


def test_non_finite_positions_are_rejected():
    with pytest.raises(ConfigurationError):
        ParticleEnsemble([[0.0], [np.nan]])


def test_dirac():
    ensemble = ParticleEnsemble.dirac([1.0, -2.0])
    assert ensemble.n == 1
    np.testing.assert_array_equal(ensemble.mean, [1.0, -2.0])


def test_check_point_dimension():
    ensemble = ParticleEnsemble([[0.0, 0.0]])
    np.testing.assert_array_equal(ensemble.check_point([1, 2]), [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        ensemble.check_point([1.0, 2.0, 3.0])
