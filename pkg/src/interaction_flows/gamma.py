'''
Bounded-cost Wasserstein distance between empirical measures.

    gamma(mu, nu) = inf over couplings k of int |u - v| / (1 + |u - v|) k(du, dv)

For two uniform empirical measures with the same number of atoms the infimum is
attained at a permutation, so gamma is an assignment problem. The cost is concave
in the distance, which rules out sorted matching even on the line; the exact
assignment solver is used in every dimension.
'''

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from interaction_flows.errors import ConfigurationError, PreconditionError, UnsupportedError

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class EmpiricalMeasure:
    '''M atoms in R^d, each with weight 1/M.'''

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise PreconditionError(f'Empirical measure needs at least one atom, got {atoms.shape}')
        if not np.all(np.isfinite(atoms)):
            raise ConfigurationError('Atom coordinates must be finite')
        atoms.setflags(write=False)
        object.__setattr__(self, 'atoms', atoms)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)


def bounded_cost(r):
    '''r / (1 + r) for distances r >= 0.'''
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise PreconditionError('Distances must be non-negative')
    cost = r / (1.0 + r)
    return float(cost) if cost.ndim == 0 else cost


def _as_measure(mu) -> EmpiricalMeasure:
    return mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)


def cost_matrix(mu, nu) -> np.ndarray:
    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.d != nu.d:
        raise ConfigurationError(f'Measures live in different dimensions: {mu.d} and {nu.d}')
    distances = np.linalg.norm(mu.atoms[:, None, :] - nu.atoms[None, :, :], axis=-1)
    return bounded_cost(distances)


def gamma_to_dirac(mu, y) -> float:
    '''gamma(mu, delta_y); the only coupling with a Dirac is the product one.'''
    mu = _as_measure(mu)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != mu.d:
        raise ConfigurationError(f'Point has dimension {y.shape[0]}, measure has {mu.d}')
    costs = bounded_cost(np.linalg.norm(mu.atoms - y, axis=-1))
    return math.fsum(np.atleast_1d(costs)) / mu.size


@dataclass(frozen=True)
class Matching:
    '''Optimal assignment: atom i of mu is sent to atom pairs[i] of nu.'''

    distance: float
    pairs: np.ndarray
    costs: np.ndarray


def _check_sizes(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.size != nu.size:
        raise UnsupportedError(
            f'Only equal-size empirical measures are supported, got {mu.size} and {nu.size}'
        )


def optimal_matching(mu, nu) -> Matching:
    mu, nu = _as_measure(mu), _as_measure(nu)
    _check_sizes(mu, nu)
    cost = cost_matrix(mu, nu)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    pairs = cols[order]
    costs = cost[np.arange(mu.size), pairs]
    # math.fsum keeps the value independent of the summation order
    return Matching(math.fsum(costs) / mu.size, pairs, costs)


def gamma_empirical(mu, nu) -> float:
    '''gamma between two uniform empirical measures with the same number of atoms.'''
    return optimal_matching(mu, nu).distance


def gamma_bruteforce(mu, nu) -> float:
    '''Minimum over all M! permutations; M must not exceed 8.'''
    mu, nu = _as_measure(mu), _as_measure(nu)
    _check_sizes(mu, nu)
    if mu.size > BRUTE_FORCE_LIMIT:
        raise UnsupportedError(
            f'Brute force is limited to {BRUTE_FORCE_LIMIT} atoms, got {mu.size}'
        )
    cost = cost_matrix(mu, nu)
    rows = np.arange(mu.size)
    best = min(
        math.fsum(cost[rows, list(perm)]) for perm in itertools.permutations(range(mu.size))
    )
    return best / mu.size
