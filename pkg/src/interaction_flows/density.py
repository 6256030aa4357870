'''
Initial densities, quadrature grids and L^p moments of the transported density.

The transported density is never evaluated on a fixed mesh. Every integral over
the current configuration is pulled back to t = 0: the grid nodes u_g are tracked
flow points, and

    p_t(x(u_g, t)) = p_0(u_g) / det Dx(u_g, t) = p_0(u_g) exp(-(BV_t + M_t)),
    int p_t^p du   = sum_g w_g p_0(u_g)^p exp(-(p - 1)(BV_t + M_t)).
'''

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import beta as beta_function
from scipy.special import logsumexp

from interaction_flows.errors import (
    ConfigurationError,
    PreconditionError,
    SamplingError,
)

if TYPE_CHECKING:
    from interaction_flows.integrator import Trajectory

# Midpoint nodes per axis when the configuration does not say otherwise
DEFAULT_GRID_SIZE = {1: 64, 2: 32, 3: 16}


def default_grid_size(d: int) -> int:
    if d not in DEFAULT_GRID_SIZE:
        raise ConfigurationError(f'Quadrature grids are supported for d <= 3, got d = {d}')
    return DEFAULT_GRID_SIZE[d]


#
# Densities
#


class DensityModel:
    '''
    Compactly supported initial density p_0 on the box [lo, hi].

    Product densities are sampled by inverse CDF along each axis; the others by
    rejection from the uniform distribution on the box.
    '''

    variant = 'abstract'
    product = True

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError(f'Support bounds must be vectors of equal length: {lo}, {hi}')
        if not np.all(hi > lo):
            raise ConfigurationError(f'Support box must have hi > lo on every axis: {lo}, {hi}')
        self.lo = lo
        self.hi = hi

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def inside(self, u: np.ndarray) -> np.ndarray:
        return np.all((u >= self.lo) & (u <= self.hi), axis=-1)

    def evaluate(self, u) -> np.ndarray:
        '''p_0(u) for u of shape (..., d).'''
        raise NotImplementedError

    def norm_pp(self, p: float) -> float | None:
        '''Analytic int p_0^p du, or None when unknown.'''
        return None

    @property
    def peak(self) -> float:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _rejection_sample(
        self, n: int, rng: np.random.Generator, max_rounds: int = 1000
    ) -> np.ndarray:
        accepted = []
        count = 0
        batch = max(2 * n, 64)
        for _ in range(max_rounds):
            proposal = self.lo + (self.hi - self.lo) * rng.random((batch, self.d))
            keep = rng.random(batch) * self.peak < self.evaluate(proposal)
            accepted.append(proposal[keep])
            count += int(keep.sum())
            if count >= n:
                return np.concatenate(accepted)[:n]
        raise SamplingError(
            f'Rejection sampler for {self.variant} density accepted {count} of {n} '
            f'samples within {max_rounds} rounds'
        )

    def to_dict(self) -> dict:
        return {'variant': self.variant, 'lo': self.lo.tolist(), 'hi': self.hi.tolist()}


class UniformBox(DensityModel):
    variant = 'uniform'

    def evaluate(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.where(self.inside(u), 1.0 / self.volume, 0.0)

    def norm_pp(self, p):
        return self.volume ** (1.0 - p)

    @property
    def peak(self):
        return 1.0 / self.volume

    def sample(self, n, rng):
        return self.lo + (self.hi - self.lo) * rng.random((n, self.d))


class BumpProduct(DensityModel):
    '''
    Product of the polynomial bumps (3/2)(1 - (2y - 1)^2) on each axis, y the
    coordinate rescaled to [0, 1].
    '''

    variant = 'bump'
    _c = 1.5

    def _rescale(self, u):
        return (np.asarray(u, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def evaluate(self, u):
        y = self._rescale(u)
        axis = self._c * (1.0 - (2.0 * y - 1.0) ** 2) / (self.hi - self.lo)
        axis = np.where((y >= 0.0) & (y <= 1.0), axis, 0.0)
        return np.prod(axis, axis=-1)

    def norm_pp(self, p):
        widths = self.hi - self.lo
        per_axis = widths ** (1.0 - p) * (4.0 * self._c) ** p * beta_function(p + 1.0, p + 1.0)
        return float(np.prod(per_axis))

    @property
    def peak(self):
        return float(np.prod(self._c / (self.hi - self.lo)))

    def sample(self, n, rng):
        # Inverse of the CDF 3y^2 - 2y^3
        y = 0.5 - np.sin(np.arcsin(1.0 - 2.0 * rng.random((n, self.d))) / 3.0)
        return self.lo + (self.hi - self.lo) * y


class RadialBump(DensityModel):
    '''c (1 - |u - center|^2 / r^2)_+ on the ball of radius r; not a product density.'''

    variant = 'radial_bump'
    product = False

    def __init__(self, center, radius: float):
        center = np.atleast_1d(np.asarray(center, dtype=np.float64))
        if radius <= 0:
            raise ConfigurationError(f'Radius must be > 0, got {radius}')
        self.center = center
        self.radius = float(radius)
        super().__init__(center - radius, center + radius)
        d = self.d
        ball_volume = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
        self._ball_volume = ball_volume
        self._c = (d + 2) / (2.0 * ball_volume * self.radius**d)

    def evaluate(self, u):
        u = np.asarray(u, dtype=np.float64)
        rho2 = np.sum((u - self.center) ** 2, axis=-1) / self.radius**2
        return self._c * np.clip(1.0 - rho2, 0.0, None)

    def norm_pp(self, p):
        d = self.d
        return float(
            self._c**p
            * self.radius**d
            * d
            * self._ball_volume
            * 0.5
            * beta_function(d / 2.0, p + 1.0)
        )

    @property
    def peak(self):
        return self._c

    def sample(self, n, rng):
        return self._rejection_sample(n, rng)

    def to_dict(self):
        return {'variant': self.variant, 'center': self.center.tolist(), 'radius': self.radius}


#
# Quadrature
#


@dataclass(frozen=True)
class QuadratureGrid:
    '''Tensor midpoint grid with G nodes per axis on the box [lo, hi].'''

    lo: np.ndarray
    hi: np.ndarray
    G: int
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.G < 1:
            raise ConfigurationError(f'Grid size must be >= 1, got {self.G}')
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        h = (hi - lo) / self.G
        axes = [lo[i] + h[i] * (np.arange(self.G) + 0.5) for i in range(lo.shape[0])]
        mesh = np.meshgrid(*axes, indexing='ij')
        nodes = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        weights = np.full(nodes.shape[0], float(np.prod(h)))
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def for_density(cls, density: DensityModel, G: int | None = None) -> 'QuadratureGrid':
        return cls(density.lo, density.hi, default_grid_size(density.d) if G is None else G)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))


#
# Moments of the transported density
#


@dataclass
class MomentSeries:
    '''ln M_p(t) at every snapshot of one replica, M_p(t) = int p_t(u)^p du.'''

    replica: int
    times: np.ndarray
    log_moments: dict[float, np.ndarray]

    @property
    def p_values(self) -> list[float]:
        return sorted(self.log_moments)

    def moments(self, p: float) -> np.ndarray:
        return np.exp(self.log_moments[p])


def _check_p(p: float):
    if p < 1:
        raise PreconditionError(f'Moment order must be >= 1, got {p}')


def _grid_arrays(trajectory: 'Trajectory'):
    grid = trajectory.grid_indices
    if grid.size == 0:
        raise ConfigurationError('Trajectory tracks no quadrature grid nodes')
    weights = trajectory.ds['weight'].values[grid]
    p0 = trajectory.ds['p0'].values[grid]
    with np.errstate(divide='ignore'):
        log_p0 = np.log(p0)
    return grid, weights, log_p0


def _log_moments(log_det: np.ndarray, weights: np.ndarray, log_p0: np.ndarray, p: float):
    '''ln sum_g w_g p_0(u_g)^p exp(-(p - 1) log_det_g) along the last axis.'''
    exponent = p * log_p0 - (p - 1.0) * log_det
    return logsumexp(exponent, b=weights, axis=-1)


def density_along_flow(
    trajectory: 'Trajectory', point_id: int, t: float, replica: int | None = None
) -> tuple[np.ndarray, float]:
    '''
    Position x(u0, t) of a tracked point and the transported density there.

    Returns
    -------
    (np.ndarray, float)
        The position and p_0(u0) exp(-(BV_t + M_t)). The value is 0 wherever
        p_0(u0) = 0, whatever the Jacobian.

    Raises
    ------
    SnapshotError
        If there is no snapshot at t (no interpolation in time).
    '''
    state = trajectory.tracked_point(point_id, t, replica)
    p0 = float(trajectory.ds['p0'].values[trajectory.point_index(point_id)])
    if p0 == 0.0:
        return state.x, 0.0
    return state.x, p0 * math.exp(-(state.bv + state.mart))


def lp_moment_at(
    trajectory: 'Trajectory', p: float, t: float, replica: int | None = None
) -> float:
    '''Quadrature estimate of int p_t(u)^p du at snapshot time t.'''
    _check_p(p)
    grid, weights, log_p0 = _grid_arrays(trajectory)
    r = trajectory.replica_index(replica)
    i = trajectory.time_index(t)
    log_det = trajectory.log_det()[r, i, grid]
    return float(np.exp(_log_moments(log_det, weights, log_p0, p)))


def moment_series(
    trajectory: 'Trajectory', p_list, replica: int | None = None
) -> MomentSeries:
    '''ln M_p(t) at every snapshot of one replica for each p in p_list.'''
    p_list = [float(p) for p in p_list]
    for p in p_list:
        _check_p(p)
    grid, weights, log_p0 = _grid_arrays(trajectory)
    r = trajectory.replica_index(replica)
    log_det = trajectory.log_det()[r][:, grid]
    return MomentSeries(
        replica=int(trajectory.replicas[r]),
        times=trajectory.times.copy(),
        log_moments={p: _log_moments(log_det, weights, log_p0, p) for p in p_list},
    )


def moment_series_all(trajectory: 'Trajectory', p_list) -> list[MomentSeries]:
    return [moment_series(trajectory, p_list, replica) for replica in trajectory.replicas]


def norm_ratio_series(series: MomentSeries, p: float, q: float) -> np.ndarray:
    '''||p_t||_p / ||p_t||_q = M_p^(1/p) / M_q^(1/q) at every snapshot.'''
    return np.exp(series.log_moments[p] / p - series.log_moments[q] / q)


def density_profile(trajectory: 'Trajectory', replica: int | None = None) -> dict[str, np.ndarray]:
    '''Positions and transported density values of every tracked point at every snapshot.'''
    r = trajectory.replica_index(replica)
    p0 = trajectory.ds['p0'].values
    log_det = trajectory.log_det()[r]
    with np.errstate(over='ignore'):
        values = np.where(p0 > 0.0, p0 * np.exp(-log_det), 0.0)
    return {
        'times': trajectory.times,
        'point_ids': trajectory.point_ids,
        'positions': trajectory.ds['x'].values[r],
        'density': values,
    }
