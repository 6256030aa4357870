import math

import numpy as np
import pytest
from conftest import linear_model

from interaction_flows.ensemble import ParticleEnsemble
from interaction_flows.errors import IndexRangeError, InvalidModelError
from interaction_flows.kernels import (
    FrozenDiffusion,
    LinearKernel,
    MeanRevertingDiffusion,
    ModelSpec,
    SaturatingKernel,
    dissipativity_report,
    moment_order_limit,
)


@pytest.fixture
def ensemble():
    rng = np.random.default_rng(3)
    return ParticleEnsemble(rng.standard_normal((20, 2)))


def test_linear_drift_is_mean_reversion(ensemble):
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    model = ModelSpec(2, LinearKernel(A))
    u = np.array([0.3, -1.2])
    np.testing.assert_allclose(model.drift_eval(u, ensemble), -A @ (u - ensemble.mean))
    assert model.drift_divergence(u, ensemble) == pytest.approx(-3.0)


def test_saturating_kernel_without_saturation_matches_linear(ensemble):
    A = np.array([[1.5, 0.2], [0.2, 1.0]])
    linear = ModelSpec(2, LinearKernel(A))
    saturating = ModelSpec(2, SaturatingKernel(A, beta=0.0))
    u = np.array([0.7, 0.1])
    np.testing.assert_allclose(
        saturating.drift_eval(u, ensemble), linear.drift_eval(u, ensemble), atol=1e-12
    )
    np.testing.assert_allclose(
        saturating.drift_jacobian(u, ensemble), linear.drift_jacobian(u, ensemble), atol=1e-12
    )


def test_saturating_alpha_bound():
    kernel = SaturatingKernel(np.eye(2), beta=1.0)
    assert kernel.alpha == pytest.approx(1.0 - 1.0 / 8.0)


def test_declared_alpha_above_bound_is_rejected():
    with pytest.raises(InvalidModelError):
        LinearKernel(np.eye(2), alpha=1.5)


def test_declared_B_below_lipschitz_constant_is_rejected():
    with pytest.raises(InvalidModelError):
        MeanRevertingDiffusion([[[1.0]]], B=0.5)


def test_mean_reverting_columns_share_derivative(ensemble):
    C = np.array([[[0.5, 0.1], [0.0, 0.3]]])
    model = ModelSpec(2, LinearKernel(np.eye(2)), MeanRevertingDiffusion(C))
    u = np.array([1.0, 2.0])
    for p in (1, 2):
        np.testing.assert_allclose(model.diffusion_jacobian(0, p, u, ensemble), -C[0])
        assert model.diffusion_divergence(0, p, u, ensemble) == pytest.approx(-0.8)


def test_diffusion_indices_are_checked(ensemble):
    model = linear_model(np.eye(2), C=np.eye(2))
    u = np.zeros(2)
    with pytest.raises(IndexRangeError):
        model.diffusion_eval(1, u, ensemble)
    with pytest.raises(IndexRangeError):
        model.diffusion_jacobian(0, 0, u, ensemble)
    with pytest.raises(IndexRangeError):
        model.diffusion_jacobian(0, 3, u, ensemble)


def test_liouville_integrand_of_isotropic_linear_model():
    # div phi = -2, sum over the two columns of tr(C^2) = 2 * 2
    model = linear_model(np.eye(2), C=np.eye(2))
    u = np.array([0.4, -0.3])
    assert model.liouville_drift_integrand(u, ParticleEnsemble.dirac(u)) == pytest.approx(-4.0)


def test_frozen_diffusion_column_structure(ensemble):
    S = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    model = ModelSpec(2, LinearKernel(np.eye(2)), FrozenDiffusion(S))
    u = np.array([0.2, -0.5])
    jac = model.diffusion_jacobian(0, 2, u, ensemble)
    expected = np.zeros((2, 2))
    expected[:, 1] = S[0, :, 1] / math.cosh(u[1]) ** 2
    np.testing.assert_allclose(jac, expected)


def test_moment_order_limit():
    assert moment_order_limit(1.0, 2.0) == 0
    assert moment_order_limit(1.5, 1.0) == 1
    assert moment_order_limit(0.5, 1.0) == 0
    assert moment_order_limit(1.0, 0.3) == 11
    assert math.isinf(moment_order_limit(1.0, 0.0))


def test_report_of_noisy_linear_model():
    model = linear_model(1.0, C=0.3)
    report = dissipativity_report(model, n_samples=200)
    assert report.alpha == pytest.approx(1.0)
    assert report.B == pytest.approx(0.3)
    assert report.p_max == 11
    assert report.admits(2)
    assert not report.admits(12)
    assert report.passed


def test_report_of_saturating_kernel_passes_spot_checks():
    model = ModelSpec(1, SaturatingKernel([[1.0]], beta=2.0, s=0.5))
    report = dissipativity_report(model, n_samples=500)
    assert report.dissipativity_ok
    assert report.divergence_ok
    assert report.derivatives_ok
    assert report.to_dict()['p_max'] == 'inf'


def test_report_flags_large_noise():
    model = linear_model(1.0, C=0.0, B=2.0)
    report = dissipativity_report(model, n_samples=50)
    assert report.p_max == 0
    assert not report.in_lemma_range
    assert not report.admits(1)
    assert report.messages


def test_report_rejects_non_dissipative_model():
    with pytest.raises(InvalidModelError):
        dissipativity_report(linear_model(0.0))
