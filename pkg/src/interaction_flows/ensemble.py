'''
Particle ensembles: the empirical measures that stand in for the law of the flow.
'''

from dataclasses import dataclass, field

import numpy as np

from interaction_flows.errors import ConfigurationError, PreconditionError


@dataclass(frozen=True)
class ParticleEnsemble:
    '''
    N particle positions in R^d approximating the pushforward measure at one time.

    The ensemble mean is the only measure summary the shipped coefficients need,
    so it is computed once on construction and shared read-only afterwards.
    '''

    positions: np.ndarray
    mean: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64)
        if positions.ndim == 1:
            # A flat list is N particles on the line
            positions = positions.reshape(-1, 1)
        if positions.ndim != 2:
            raise ConfigurationError(
                f'Ensemble positions must have shape (N, d), got {positions.shape}'
            )
        if positions.shape[0] == 0 or positions.shape[1] == 0:
            raise PreconditionError('Ensemble is empty')
        if not np.all(np.isfinite(positions)):
            raise ConfigurationError('Ensemble positions must be finite')
        positions.setflags(write=False)
        mean = positions.mean(axis=0)
        mean.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'mean', mean)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def check_point(self, u) -> np.ndarray:
        '''Return u as a float vector, checking that it lives in the ensemble's space.'''
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if u.shape[0] != self.d:
            raise ConfigurationError(f'Point has dimension {u.shape[0]}, ensemble has {self.d}')
        return u

    @classmethod
    def dirac(cls, u) -> 'ParticleEnsemble':
        '''Single-atom ensemble located at u.'''
        return cls(np.asarray(u, dtype=np.float64).reshape(1, -1))
