import numpy as np
import pytest

from interaction_flows.density import UniformBox
from interaction_flows.integrator import SimConfig, run
from interaction_flows.kernels import LinearKernel, MeanRevertingDiffusion, ModelSpec


def linear_model(A=1.0, C=None, B=None) -> ModelSpec:
    '''phi(z) = -A z, with mean-reverting noise C when given.'''
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d = A.shape[0]
    diffusion = None
    if C is not None or B is not None:
        C = np.zeros((1, d, d)) if C is None else np.asarray(C, dtype=np.float64).reshape(-1, d, d)
        diffusion = MeanRevertingDiffusion(C, B=B)
    return ModelSpec(d, LinearKernel(A), diffusion)


@pytest.fixture
def contraction_model():
    return linear_model(1.0)


@pytest.fixture
def unit_interval():
    return UniformBox([0.0], [1.0])


@pytest.fixture
def contraction_trajectory(contraction_model, unit_interval):
    '''Deterministic run of dx = -(x - m) dt from the uniform density on [0, 1].'''
    config = SimConfig(dt=0.01, T=2.0, N=16, save_every=10, grid=8)
    return run(contraction_model, unit_interval, config, probes=[[0.5], [2.0]])


@pytest.fixture
def noisy_trajectory(unit_interval):
    '''Linear model with mean-reverting noise C = 0.3, several replicas.'''
    model = linear_model(1.0, C=0.3)
    config = SimConfig(dt=0.01, T=8.0, N=16, replicas=40, seed=7, save_every=10, grid=8)
    return run(model, unit_interval, config)
