'''
Euler-Maruyama integration of the SDE with interaction and of its flow derivative.

One replica is one realisation of the Brownian family (B_k). Inside a replica all
particles and all tracked points are driven by the same increments: the system is
a stochastic flow, not a cloud of independent particles. The particle ensemble
stands in for the pushforward measure mu_t and is frozen at the start of every
step; tracked points follow the flow without feeding back into the ensemble.

Replicas are integrated in fixed-size chunks, vectorised over the chunk. Chunks
may run concurrently; each replica draws its noise from its own stream keyed by
(seed, replica), so results do not depend on the chunking being run in parallel.
'''

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass

import numpy as np
import xarray as xr

from interaction_flows.density import DensityModel, QuadratureGrid, default_grid_size
from interaction_flows.ensemble import ParticleEnsemble
from interaction_flows.errors import (
    BlowUpError,
    ConfigurationError,
    DeterminantSignError,
    SnapshotError,
)
from interaction_flows.kernels import ModelSpec, liouville_integrand

logger = logging.getLogger(__name__)

# Largest admissible dt * (Lipschitz constant of phi)
STABILITY_CAP = 0.5

# Stream tags of the per-replica seed sequences
_NOISE_STREAM = 0
_ENSEMBLE_STREAM = 1


@dataclass(frozen=True)
class SimConfig:
    '''
    Time stepping and sampling parameters.

    ``grid`` is the number of quadrature nodes per axis (None for the default of
    the dimension, 0 for no grid). ``batch_size`` fixes how many replicas are
    integrated together; it affects speed only.
    '''

    dt: float
    T: float
    N: int
    replicas: int = 1
    seed: int = 0
    save_every: int = 1
    K: int | None = None
    grid: int | None = None
    batch_size: int = 16
    store_particles: bool = True

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError('; '.join(problems))

    def violations(self) -> list[str]:
        problems = []
        if not self.dt > 0:
            problems.append(f'dt must be > 0, got {self.dt}')
            return problems
        if not self.T >= self.dt:
            problems.append(f'T must be >= dt, got T = {self.T}, dt = {self.dt}')
        if self.N < 1:
            problems.append(f'N must be >= 1, got {self.N}')
        if self.replicas < 1:
            problems.append(f'replicas must be >= 1, got {self.replicas}')
        if self.save_every < 1:
            problems.append(f'save_every must be >= 1, got {self.save_every}')
        if self.batch_size < 1:
            problems.append(f'batch_size must be >= 1, got {self.batch_size}')
        if self.grid is not None and self.grid < 0:
            problems.append(f'grid must be >= 0, got {self.grid}')
        if self.K is not None and self.K < 0:
            problems.append(f'K must be >= 0, got {self.K}')
        if not problems and self.n_steps % self.save_every:
            problems.append(
                f'number of steps {self.n_steps} is not a multiple of save_every = {self.save_every}'
            )
        return problems

    @property
    def n_steps(self) -> int:
        # Tolerate T/dt landing a rounding error above an integer
        return max(1, math.ceil(self.T / self.dt - 1e-9))

    @property
    def snapshot_steps(self) -> np.ndarray:
        return np.arange(0, self.n_steps + 1, self.save_every)

    @property
    def snapshot_times(self) -> np.ndarray:
        return self.snapshot_steps * self.dt

    def to_dict(self) -> dict:
        return asdict(self)


def check_stability(model: ModelSpec, dt: float):
    '''Reject step sizes for which I + Da dt can come close to singular.'''
    load = dt * model.kernel.lipschitz
    if load > STABILITY_CAP:
        raise ConfigurationError(
            f'dt * Lipschitz(phi) = {load:.4g} exceeds the stability cap {STABILITY_CAP}; '
            'reduce dt'
        )


#
# Randomness
#


def replica_seed_sequence(seed: int, replica: int, stream: int) -> np.random.SeedSequence:
    '''Seed sequence of one stream of one replica; children of SeedSequence(seed).'''
    return np.random.SeedSequence(seed, spawn_key=(replica, stream))


def replica_rng(seed: int, replica: int, stream: int = _NOISE_STREAM) -> np.random.Generator:
    return np.random.default_rng(replica_seed_sequence(seed, replica, stream))


def brownian_increments(
    seed: int, replica: int, n_steps: int, count: int, d: int, dt: float
) -> np.ndarray:
    '''All increments of (B_0, ..., B_K) for one replica, shape (n_steps, K+1, d).'''
    rng = replica_rng(seed, replica, _NOISE_STREAM)
    return math.sqrt(dt) * rng.standard_normal((n_steps, count, d))


@dataclass(frozen=True)
class NoiseDraw:
    '''Increments Delta B_k of one step for a batch of replicas, shape (b, K+1, d).'''

    increments: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, batch: int, count: int, d: int, step: int = 0) -> 'NoiseDraw':
        return cls(np.zeros((batch, count, d)), step)


def sample_initial_ensemble(
    density: DensityModel, N: int, seed: int | np.random.SeedSequence
) -> ParticleEnsemble:
    '''N i.i.d. samples of p_0, deterministic in the seed.'''
    if N < 1:
        raise ConfigurationError(f'N must be >= 1, got {N}')
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(density.sample(N, rng))


#
# State and one step
#


@dataclass(frozen=True)
class TrackedPoint:
    '''
    Flow position x(u0, t), Jacobian Dx(u0, t) and the split log-determinant.

    ``bv`` accumulates the bounded-variation part and ``mart`` the martingale part
    of ln det Dx(u0, t).
    '''

    u0: np.ndarray
    x: np.ndarray
    J: np.ndarray
    bv: float = 0.0
    mart: float = 0.0

    @classmethod
    def initial(cls, u0) -> 'TrackedPoint':
        u0 = np.asarray(u0, dtype=np.float64).reshape(-1)
        return cls(u0, u0.copy(), np.eye(u0.shape[0]))

    @property
    def log_det(self) -> float:
        return self.bv + self.mart

    def exponent(self, t: float) -> float:
        '''Finite-time Lyapunov exponent (BV_t + M_t) / t.'''
        return self.log_det / t


@dataclass(frozen=True)
class FlowState:
    '''
    Batched state of b replicas.

    particles (b, N, d), x (b, P, d), J (b, P, d, d), bv and mart (b, P).
    '''

    particles: np.ndarray
    x: np.ndarray
    J: np.ndarray
    bv: np.ndarray
    mart: np.ndarray

    @classmethod
    def start(cls, particles: np.ndarray, u0: np.ndarray) -> 'FlowState':
        b, P, d = particles.shape[0], u0.shape[0], u0.shape[1]
        return cls(
            particles=particles.copy(),
            x=np.broadcast_to(u0, (b, P, d)).copy(),
            J=np.broadcast_to(np.eye(d), (b, P, d, d)).copy(),
            bv=np.zeros((b, P)),
            mart=np.zeros((b, P)),
        )

    @classmethod
    def from_ensemble(cls, ensemble: ParticleEnsemble, points) -> 'FlowState':
        '''Single-replica state with tracked points started at ``points``.'''
        u0 = np.asarray(points, dtype=np.float64).reshape(-1, ensemble.d)
        return cls.start(ensemble.positions[None], u0)

    @property
    def batch(self) -> int:
        return self.particles.shape[0]

    def ensemble(self, replica: int = 0) -> ParticleEnsemble:
        return ParticleEnsemble(self.particles[replica])

    def tracked_point(self, i: int, u0, replica: int = 0) -> TrackedPoint:
        return TrackedPoint(
            u0=np.asarray(u0, dtype=np.float64),
            x=self.x[replica, i].copy(),
            J=self.J[replica, i].copy(),
            bv=float(self.bv[replica, i]),
            mart=float(self.mart[replica, i]),
        )


def _determinants(J: np.ndarray) -> np.ndarray:
    if J.shape[-1] == 1:
        return J[..., 0, 0]
    return np.linalg.det(J)


def em_step(
    state: FlowState, noise: NoiseDraw, model: ModelSpec, dt: float, time: float = 0.0
) -> FlowState:
    '''
    One Euler-Maruyama step of the particles, the tracked points and their Jacobians.

    The measure is frozen at the start of the step and all replicas' points use
    the shared increments of their replica.

    Raises
    ------
    BlowUpError
        If any coordinate, Jacobian entry or log-determinant becomes non-finite.
    DeterminantSignError
        If det J <= 0 for some tracked point.
    '''
    kernel, diffusion = model.kernel, model.diffusion
    dB = noise.increments
    particles, x = state.particles, state.x
    means = particles.mean(axis=1)

    # Particles
    drift_particles = kernel.drift(particles, particles, means)
    noise_particles = diffusion.values(particles, means)
    new_particles = (
        particles
        + drift_particles * dt
        + np.einsum('bnkip,bkp->bni', noise_particles, dB)
    )

    # Tracked points and their variational equation
    drift_x = kernel.drift(x, particles, means)
    drift_jac = kernel.drift_jacobian(x, particles, means)
    noise_x = diffusion.values(x, means)
    noise_jac = diffusion.column_jacobians(x, means)

    new_x = x + drift_x * dt + np.einsum('bxkip,bkp->bxi', noise_x, dB)
    d = x.shape[-1]
    propagator = np.eye(d) + drift_jac * dt + np.einsum('bxkpij,bkp->bxij', noise_jac, dB)
    new_J = np.einsum('bxij,bxjl->bxil', propagator, state.J)
    new_bv = state.bv + liouville_integrand(drift_jac, noise_jac) * dt
    new_mart = state.mart + np.einsum('bxkpii,bkp->bx', noise_jac, dB)

    finite = (
        np.all(np.isfinite(new_particles), axis=(1, 2))
        & np.all(np.isfinite(new_x), axis=(1, 2))
        & np.all(np.isfinite(new_J), axis=(1, 2, 3))
        & np.all(np.isfinite(new_bv), axis=1)
        & np.all(np.isfinite(new_mart), axis=1)
    )
    step_time = time + dt
    if not np.all(finite):
        bad = np.flatnonzero(~finite)
        point_ok = np.isfinite(new_x[bad[0]]).all(axis=-1) & np.isfinite(new_J[bad[0]]).all(
            axis=(-2, -1)
        )
        point = int(np.flatnonzero(~point_ok)[0]) if not point_ok.all() else None
        raise BlowUpError(noise.step + 1, step_time, bad.tolist(), point)

    if new_J.shape[1]:
        det = _determinants(new_J)
        negative = det <= 0.0
        if np.any(negative):
            bad = np.flatnonzero(negative.any(axis=1))
            point = int(np.flatnonzero(negative[bad[0]])[0])
            raise DeterminantSignError(
                noise.step + 1,
                step_time,
                bad.tolist(),
                point,
                detail=f'det J = {det[bad[0], point]:.3e}; dt is too large',
            )

    return FlowState(new_particles, new_x, new_J, new_bv, new_mart)


#
# Trajectories
#


class Trajectory:
    '''
    Snapshots of one or more replicas, held as an xarray Dataset.

    Dimensions: replica, time, point, axis, col and (when particles are stored)
    particle. Point metadata: u0, p0 (initial density at u0), weight (quadrature
    weight, 0 for probes) and is_grid.
    '''

    def __init__(self, ds: xr.Dataset):
        self.ds = ds

    @property
    def times(self) -> np.ndarray:
        return self.ds['time'].values

    @property
    def replicas(self) -> np.ndarray:
        return self.ds['replica'].values

    @property
    def point_ids(self) -> np.ndarray:
        return self.ds['point'].values

    @property
    def d(self) -> int:
        return self.ds.sizes['axis']

    @property
    def grid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.ds['is_grid'].values.astype(bool))

    @property
    def probe_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.ds['is_grid'].values.astype(bool))

    @property
    def has_particles(self) -> bool:
        return 'particles' in self.ds

    @property
    def failures(self) -> list[dict]:
        return json.loads(self.ds.attrs.get('failures', '[]'))

    @property
    def model(self) -> dict:
        return json.loads(self.ds.attrs['model'])

    @property
    def sim_config(self) -> dict:
        return json.loads(self.ds.attrs['sim_config'])

    def time_index(self, t: float) -> int:
        times = self.times
        matches = np.flatnonzero(np.abs(times - t) <= 1e-9 * max(1.0, abs(t)))
        if matches.size == 0:
            raise SnapshotError(f'No snapshot at t = {t}; snapshots are exact, not interpolated')
        return int(matches[0])

    def replica_index(self, replica: int | None = None) -> int:
        if replica is None:
            if self.replicas.size == 0:
                raise SnapshotError('Trajectory holds no replicas')
            return 0
        matches = np.flatnonzero(self.replicas == replica)
        if matches.size == 0:
            raise SnapshotError(f'Replica {replica} is not in the trajectory')
        return int(matches[0])

    def point_index(self, point_id: int) -> int:
        matches = np.flatnonzero(self.point_ids == point_id)
        if matches.size == 0:
            raise ConfigurationError(f'Point {point_id} is not tracked')
        return int(matches[0])

    def log_det(self) -> np.ndarray:
        '''ln det Dx = BV + M, shape (replica, time, point).'''
        return self.ds['logdet_bv'].values + self.ds['logdet_mart'].values

    def tracked_point(self, point_id: int, t: float, replica: int | None = None) -> TrackedPoint:
        r, i, g = self.replica_index(replica), self.time_index(t), self.point_index(point_id)
        return TrackedPoint(
            u0=self.ds['u0'].values[g],
            x=self.ds['x'].values[r, i, g],
            J=self.ds['jacobian'].values[r, i, g],
            bv=float(self.ds['logdet_bv'].values[r, i, g]),
            mart=float(self.ds['logdet_mart'].values[r, i, g]),
        )

    def ensemble_at(self, t: float, replica: int | None = None) -> ParticleEnsemble:
        if not self.has_particles:
            raise ConfigurationError('Trajectory was saved without particle positions')
        r, i = self.replica_index(replica), self.time_index(t)
        return ParticleEnsemble(self.ds['particles'].values[r, i])


def tracked_points(
    density: DensityModel, config: SimConfig, probes=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''Initial points (grid nodes first, then probes), their weights and grid flags.'''
    d = density.d
    G = default_grid_size(d) if config.grid is None else config.grid
    if G > 0:
        grid = QuadratureGrid.for_density(density, G)
        nodes, weights = grid.nodes, grid.weights
    else:
        nodes, weights = np.zeros((0, d)), np.zeros(0)
    probes = np.zeros((0, d)) if probes is None else np.asarray(probes, dtype=np.float64)
    probes = probes.reshape(-1, d)
    u0 = np.concatenate([nodes, probes])
    weights = np.concatenate([weights, np.zeros(probes.shape[0])])
    is_grid = np.concatenate([np.ones(nodes.shape[0], bool), np.zeros(probes.shape[0], bool)])
    return u0, weights, is_grid


def _integrate_chunk(
    model: ModelSpec,
    density: DensityModel,
    config: SimConfig,
    replicas: list[int],
    u0: np.ndarray,
) -> dict[str, np.ndarray]:
    '''Integrate a chunk of replicas, returning the snapshot arrays.'''
    d, count, n_steps, dt = model.d, model.diffusion.count, config.n_steps, config.dt

    particles = np.stack(
        [
            sample_initial_ensemble(
                density, config.N, replica_seed_sequence(config.seed, r, _ENSEMBLE_STREAM)
            ).positions
            for r in replicas
        ]
    )
    increments = np.stack(
        [brownian_increments(config.seed, r, n_steps, count, d, dt) for r in replicas], axis=1
    )  # (n_steps, b, K+1, d)

    state = FlowState.start(particles, u0)
    saved = {name: [] for name in ('x', 'jacobian', 'logdet_bv', 'logdet_mart', 'ensemble_mean')}
    if config.store_particles:
        saved['particles'] = []

    def save(s: FlowState):
        saved['x'].append(s.x)
        saved['jacobian'].append(s.J)
        saved['logdet_bv'].append(s.bv)
        saved['logdet_mart'].append(s.mart)
        saved['ensemble_mean'].append(s.particles.mean(axis=1))
        if config.store_particles:
            saved['particles'].append(s.particles)

    save(state)
    for step in range(n_steps):
        try:
            state = em_step(state, NoiseDraw(increments[step], step), model, dt, step * dt)
        except (BlowUpError, DeterminantSignError) as exc:
            # Report replica ids, not chunk positions
            raise type(exc)(
                exc.step, exc.time, [replicas[i] for i in exc.replicas], exc.point, exc.detail
            ) from None
        if (step + 1) % config.save_every == 0:
            save(state)

    # Stack as (replica, time, ...)
    return {name: np.stack(values, axis=1) for name, values in saved.items()}


def run(
    model: ModelSpec,
    density: DensityModel,
    config: SimConfig,
    probes=None,
    threads: int = 1,
    on_failure: str = 'raise',
) -> Trajectory:
    '''
    Integrate all replicas of an experiment.

    Parameters
    ----------
    model : ModelSpec
        Coefficients of the equation.
    density : DensityModel
        Initial density; the particles are sampled from it and its support box
        carries the quadrature grid.
    config : SimConfig
        Step size, horizon, sizes and seed.
    probes : array-like, optional
        Extra tracked points (shape (n, d)), appended after the grid nodes.
    threads : int, optional
        Number of replica chunks integrated concurrently. Never changes results.
    on_failure : {'raise', 'record'}, optional
        With 'raise', a blow-up or determinant-sign failure propagates. With
        'record', the failed replica is dropped, listed in the trajectory's
        ``failures`` and the rest of its chunk is integrated again without it.

    Returns
    -------
    Trajectory
    '''
    if density.d != model.d:
        raise ConfigurationError(
            f'Density dimension {density.d} does not match model dimension {model.d}'
        )
    if config.K is not None and config.K != model.K:
        raise ConfigurationError(f'SimConfig K = {config.K} but the model has K = {model.K}')
    if on_failure not in ('raise', 'record'):
        raise ConfigurationError(f'on_failure must be "raise" or "record", got {on_failure!r}')
    check_stability(model, config.dt)

    u0, weights, is_grid = tracked_points(density, config, probes)
    replica_ids = list(range(config.replicas))
    chunks = [
        replica_ids[i : i + config.batch_size]
        for i in range(0, len(replica_ids), config.batch_size)
    ]
    failures: list[dict] = []

    def integrate(chunk: list[int]):
        chunk = list(chunk)
        while chunk:
            try:
                logger.info('Integrating replicas %d..%d', chunk[0], chunk[-1])
                return chunk, _integrate_chunk(model, density, config, chunk, u0)
            except (BlowUpError, DeterminantSignError) as exc:
                if on_failure == 'raise':
                    raise
                logger.warning('Dropping replica(s) %s: %s', exc.replicas, exc)
                for r in exc.replicas:
                    failures.append(
                        {
                            'replica': r,
                            'error': type(exc).__name__,
                            'step': exc.step,
                            'time': exc.time,
                            'point': exc.point,
                            'message': str(exc),
                        }
                    )
                chunk = [r for r in chunk if r not in exc.replicas]
        return chunk, None

    results: list = [None] * len(chunks)
    if threads is None or threads <= 1:
        for i, chunk in enumerate(chunks):
            results[i] = integrate(chunk)
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            futures = {executor.submit(integrate, chunk): i for i, chunk in enumerate(chunks)}
            for future in as_completed(futures):
                results[futures[future]] = future.result()

    kept = [(ids, arrays) for ids, arrays in results if arrays is not None]
    failures.sort(key=lambda f: f['replica'])
    return _build_trajectory(model, density, config, u0, weights, is_grid, kept, failures)


def _build_trajectory(model, density, config, u0, weights, is_grid, kept, failures) -> Trajectory:
    d, P = model.d, u0.shape[0]
    S = config.snapshot_steps.shape[0]
    ids = [r for chunk_ids, _ in kept for r in chunk_ids]

    def gather(name, shape):
        if kept:
            return np.concatenate([arrays[name] for _, arrays in kept], axis=0)
        return np.zeros((0, S) + shape)

    data_vars = {
        'x': (('replica', 'time', 'point', 'axis'), gather('x', (P, d))),
        'jacobian': (('replica', 'time', 'point', 'axis', 'col'), gather('jacobian', (P, d, d))),
        'logdet_bv': (('replica', 'time', 'point'), gather('logdet_bv', (P,))),
        'logdet_mart': (('replica', 'time', 'point'), gather('logdet_mart', (P,))),
        'ensemble_mean': (('replica', 'time', 'axis'), gather('ensemble_mean', (d,))),
        'u0': (('point', 'axis'), u0),
        'p0': (('point',), density.evaluate(u0) if P else np.zeros(0)),
        'weight': (('point',), weights),
        'is_grid': (('point',), is_grid.astype(np.int8)),
    }
    if config.store_particles:
        data_vars['particles'] = (
            ('replica', 'time', 'particle', 'axis'),
            gather('particles', (config.N, d)),
        )

    ds = xr.Dataset(
        data_vars,
        coords={
            'replica': np.asarray(ids, dtype=np.int64),
            'time': config.snapshot_times,
            'point': np.arange(P, dtype=np.int64),
            'axis': np.arange(1, d + 1, dtype=np.int64),
            'col': np.arange(1, d + 1, dtype=np.int64),
        },
        attrs={
            'model': json.dumps(model.to_dict()),
            'density': json.dumps(density.to_dict()),
            'sim_config': json.dumps(config.to_dict()),
            'failures': json.dumps(failures),
        },
    )
    return Trajectory(ds)
