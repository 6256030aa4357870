'''
Long-time estimators: Lyapunov exponents, moment Lyapunov exponents and the
intermittency verdict, plus the contraction, clustering and martingale
diagnostics that back them.

Monte Carlo error bars are replica standard errors; acceptance rules elsewhere in
the package use three of them.
'''

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from interaction_flows.density import DensityModel, MomentSeries
from interaction_flows.ensemble import ParticleEnsemble
from interaction_flows.errors import (
    ConfigurationError,
    NotApplicableError,
    PreconditionError,
)
from interaction_flows.gamma import EmpiricalMeasure, gamma_to_dirac
from interaction_flows.integrator import SimConfig, Trajectory, run
from interaction_flows.kernels import (
    LinearKernel,
    MeanRevertingDiffusion,
    ModelSpec,
    dissipativity_report,
)

logger = logging.getLogger(__name__)

DEFAULT_P_GRID = (1.5, 2.0, 3.0, 4.0)
DEFAULT_EPS_MONO = 1e-3
MIN_FIT_SNAPSHOTS = 10


def _stderr(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    n = samples.shape[axis]
    if n < 2:
        return np.zeros_like(np.take(samples, 0, axis=axis), dtype=np.float64)
    return np.std(samples, axis=axis, ddof=1) / math.sqrt(n)


def _linear_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    '''Least-squares slope, intercept and R^2 of y against t.'''
    slope, intercept = np.polyfit(t, y, 1)
    residual = y - (slope * t + intercept)
    ss_res = float(np.sum(residual**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return float(slope), float(intercept), r2


#
# Pointwise Lyapunov exponents
#


@dataclass
class LyapunovReport:
    '''
    Finite-time Lyapunov exponents (BV_T + M_T) / T of tracked points.

    ``samples`` has shape (replica, point). ``lambda_hat`` pools the points of each
    replica first, then averages over replicas; its standard error is the
    replica standard error. ``martingale_share`` is max |M_T| / T.
    '''

    t: float
    point_ids: np.ndarray
    replicas: np.ndarray
    samples: np.ndarray
    lambda_hat: float
    stderr: float
    martingale_share: float

    @property
    def per_point(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def per_point_stderr(self) -> np.ndarray:
        return _stderr(self.samples, axis=0)

    def to_dict(self) -> dict:
        return {
            't': self.t,
            'lambda_hat': self.lambda_hat,
            'stderr': self.stderr,
            'martingale_share': self.martingale_share,
            'n_replicas': int(self.samples.shape[0]),
            'points': [
                {'point_id': int(g), 'lambda': float(m), 'stderr': float(s)}
                for g, m, s in zip(self.point_ids, self.per_point, self.per_point_stderr)
            ],
        }


def pointwise_lyapunov(
    trajectory: Trajectory, point_id=None, t: float | None = None, burn_in: float = 0.0
) -> LyapunovReport:
    '''
    Lyapunov exponent estimate ln det Dx(u, t) / t at one, several or all tracked points.

    Parameters
    ----------
    trajectory : Trajectory
    point_id : int or sequence of int, optional
        Tracked point(s); all points when omitted.
    t : float, optional
        Evaluation time, the final snapshot by default.
    burn_in : float, optional
        Minimum admissible evaluation time.
    '''
    if trajectory.replicas.size == 0:
        raise PreconditionError('Trajectory holds no replicas')
    i = len(trajectory.times) - 1 if t is None else trajectory.time_index(t)
    T = float(trajectory.times[i])
    if T <= 0 or T < burn_in:
        raise PreconditionError(f'Evaluation time {T} must be positive and >= burn-in {burn_in}')

    if point_id is None:
        columns = np.arange(trajectory.point_ids.size)
    else:
        ids = np.atleast_1d(point_id)
        columns = np.array([trajectory.point_index(int(g)) for g in ids])

    samples = trajectory.log_det()[:, i][:, columns] / T
    replica_means = samples.mean(axis=1)
    mart = trajectory.ds['logdet_mart'].values[:, i][:, columns]
    return LyapunovReport(
        t=T,
        point_ids=trajectory.point_ids[columns],
        replicas=trajectory.replicas.copy(),
        samples=samples,
        lambda_hat=float(replica_means.mean()),
        stderr=float(_stderr(replica_means)),
        martingale_share=float(np.abs(mart).max() / T) if mart.size else 0.0,
    )


def closed_form_lambda(model: ModelSpec, n_samples: int = 64, seed: int = 0) -> float:
    '''
    div phi(0) - L / 2, with L = sum_k sum_p tr((Db_k^{., p}(u, delta_u))^2).

    L is sampled at Dirac measures located at random points.

    Raises
    ------
    NotApplicableError
        If L varies with u.
    '''
    rng = np.random.default_rng(seed)
    values = [
        model.liouville_drift_integrand(u, ParticleEnsemble.dirac(u))
        for u in 2.0 * rng.standard_normal((n_samples, model.d))
    ]
    values = np.asarray(values)
    if not np.allclose(values, values[0], rtol=1e-9, atol=1e-12):
        raise NotApplicableError(
            'sum_k sum_p tr((Db_k^{., p})^2) at Dirac measures depends on u; '
            f'observed range [{values.min():.6g}, {values.max():.6g}]'
        )
    return float(values[0])


@dataclass(frozen=True)
class GrowthCondition:
    '''A value whose sign decides intermittency (negative means intermittent).'''

    label: str
    value: float

    @property
    def intermittent(self) -> bool:
        return self.value < 0

    def to_dict(self) -> dict:
        return {'label': self.label, 'value': self.value, 'intermittent': self.intermittent}


def printed_example_condition(model: ModelSpec) -> GrowthCondition:
    '''
    tr(A) - 1/2 sum_{k,p} tr(C_k^2) for the linear mean-reverting model.

    This is the condition as it is usually printed for the linear example. It
    disagrees in sign and scaling with theorem_condition and is only reported.
    '''
    if not isinstance(model.kernel, LinearKernel) or not isinstance(
        model.diffusion, MeanRevertingDiffusion
    ):
        raise NotApplicableError('The printed condition covers linear mean-reverting models only')
    C = model.diffusion.C
    squares = model.d * float(np.einsum('kij,kji->', C, C))
    return GrowthCondition('printed_example', float(np.trace(model.kernel.A)) - 0.5 * squares)


def theorem_condition(model: ModelSpec) -> GrowthCondition:
    '''The Liouville-derived exponent div phi(0) - L / 2 as a condition.'''
    return GrowthCondition('theorem', closed_form_lambda(model))


#
# Moment Lyapunov exponents
#


def _window_mask(times: np.ndarray, window) -> np.ndarray:
    T = times[-1]
    if window is None:
        window = 0.5
    if np.isscalar(window):
        if not 0.0 <= window < 1.0:
            raise ConfigurationError(f'Fit window fraction must be in [0, 1), got {window}')
        t0, t1 = (1.0 - window) * T, T
    else:
        t0, t1 = window
        if t0 < times[0] or t1 > T + 1e-12 or t0 >= t1:
            raise ConfigurationError(f'Fit window [{t0}, {t1}] is not inside [{times[0]}, {T}]')
    eps = 1e-9 * max(1.0, T)
    return (times >= t0 - eps) & (times <= t1 + eps)


def moment_lyapunov(series: MomentSeries, p: float, window=None) -> tuple[float, float]:
    '''
    Slope lambda_p of ln M_p(t) against t, with its R^2.

    ``window`` is either the fraction of the horizon at its end (default 0.5, the
    last half) or an explicit interval (t0, t1).
    '''
    if p not in series.log_moments:
        raise ConfigurationError(f'Series has no moments of order {p}')
    mask = _window_mask(series.times, window)
    if mask.sum() < MIN_FIT_SNAPSHOTS:
        raise PreconditionError(
            f'Fit window holds {int(mask.sum())} snapshots, at least {MIN_FIT_SNAPSHOTS} needed'
        )
    slope, _, r2 = _linear_fit(series.times[mask], series.log_moments[p][mask])
    return slope, r2


@dataclass
class MomentLyapunovFit:
    '''
    lambda_p over a p grid, pooled over replicas, and the fit of lambda_p against p - 1.

    ``samples`` holds the per-replica slopes, shape (replica, p).
    '''

    p_values: np.ndarray
    window: tuple[float, float]
    samples: np.ndarray
    r2_samples: np.ndarray
    slope: float
    slope_stderr: float
    intercept: float
    slope_r2: float

    @property
    def lambda_p(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return _stderr(self.samples, axis=0)

    @property
    def r2(self) -> np.ndarray:
        return self.r2_samples.mean(axis=0)

    def to_dict(self) -> dict:
        return {
            'p': self.p_values.tolist(),
            'lambda_p': self.lambda_p.tolist(),
            'stderr': self.stderr.tolist(),
            'r2': self.r2.tolist(),
            'window': list(self.window),
            'slope': self.slope,
            'slope_stderr': self.slope_stderr,
            'intercept': self.intercept,
            'slope_r2': self.slope_r2,
        }


def fit_moment_lyapunov(
    series_list: list[MomentSeries], p_grid=DEFAULT_P_GRID, window=None
) -> MomentLyapunovFit:
    '''Fit lambda_p for every replica and p, then lambda_p against p - 1.'''
    if not series_list:
        raise PreconditionError('No moment series to fit')
    p_values = np.asarray([float(p) for p in p_grid])
    samples = np.empty((len(series_list), p_values.size))
    r2_samples = np.empty_like(samples)
    for r, series in enumerate(series_list):
        for j, p in enumerate(p_values):
            samples[r, j], r2_samples[r, j] = moment_lyapunov(series, p, window)

    times = series_list[0].times
    mask = _window_mask(times, window)
    window_bounds = (float(times[mask][0]), float(times[mask][-1]))

    if p_values.size >= 2:
        x = p_values - 1.0
        slope, intercept, slope_r2 = _linear_fit(x, samples.mean(axis=0))
        replica_slopes = np.array([np.polyfit(x, row, 1)[0] for row in samples])
        slope_stderr = float(_stderr(replica_slopes))
    else:
        slope, intercept, slope_r2, slope_stderr = math.nan, math.nan, math.nan, math.nan

    return MomentLyapunovFit(
        p_values=p_values,
        window=window_bounds,
        samples=samples,
        r2_samples=r2_samples,
        slope=slope,
        slope_stderr=slope_stderr,
        intercept=intercept,
        slope_r2=slope_r2,
    )


@dataclass(frozen=True)
class SlopeRelation:
    '''Comparison of the slope of lambda_p in p - 1 with -lambda_hat.'''

    slope: float
    lambda_hat: float
    residual: float
    stderr: float

    def within(self, k: float = 3.0, floor: float = 0.02) -> bool:
        return self.residual <= max(k * self.stderr, floor)

    def to_dict(self) -> dict:
        return {
            'slope': self.slope,
            'lambda_hat': self.lambda_hat,
            'residual': self.residual,
            'stderr': self.stderr,
            'within_3se': self.within(),
        }


def slope_relation_check(
    lambda_hat: float, fit: MomentLyapunovFit, lambda_stderr: float = 0.0
) -> SlopeRelation:
    '''Residual |s + lambda_hat| of the relation lambda_p = -lambda (p - 1).'''
    if fit.p_values.size < 3:
        raise PreconditionError(f'Slope relation needs at least 3 values of p, got {fit.p_values.size}')
    stderr = math.sqrt(fit.slope_stderr**2 + lambda_stderr**2)
    return SlopeRelation(fit.slope, lambda_hat, abs(fit.slope + lambda_hat), stderr)


def laplace_moment_prediction(report: LyapunovReport, p_grid=DEFAULT_P_GRID) -> np.ndarray:
    '''lambda_p predicted as max over tracked u of -lambda(u) (p - 1).'''
    lam = report.per_point
    return np.array([float(np.max(-lam * (float(p) - 1.0))) for p in p_grid])


@dataclass
class IntermittencyVerdict:
    '''lambda_p / p over the p grid and whether it increases by more than eps_mono each step.'''

    p_values: np.ndarray
    lambda_p: np.ndarray
    eps_mono: float
    ratios: np.ndarray = field(init=False)
    increments: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ratios = self.lambda_p / self.p_values
        self.increments = np.diff(self.ratios)

    @property
    def margin(self) -> float:
        return float(self.increments.min())

    @property
    def intermittent(self) -> bool:
        return bool(np.all(self.increments > self.eps_mono))

    @property
    def label(self) -> str:
        return 'intermittent' if self.intermittent else 'not intermittent'

    def to_dict(self) -> dict:
        return {
            'p': self.p_values.tolist(),
            'lambda_p': self.lambda_p.tolist(),
            'ratios': self.ratios.tolist(),
            'margins': self.increments.tolist(),
            'margin': self.margin,
            'eps_mono': self.eps_mono,
            'verdict': self.label,
        }


def intermittency_verdict(
    lambda_p, p_grid=DEFAULT_P_GRID, eps_mono: float = DEFAULT_EPS_MONO
) -> IntermittencyVerdict:
    p_values = np.asarray([float(p) for p in p_grid])
    lambda_p = np.asarray(lambda_p, dtype=np.float64)
    if p_values.size < 3:
        raise PreconditionError(f'p grid needs at least 3 entries, got {p_values.size}')
    if lambda_p.shape != p_values.shape:
        raise ConfigurationError(
            f'{lambda_p.size} exponents given for a p grid of {p_values.size} values'
        )
    if np.any(np.diff(p_values) <= 0) or p_values[0] < 1:
        raise PreconditionError(f'p grid must be strictly increasing from p >= 1, got {p_values}')
    if eps_mono < 0:
        raise ConfigurationError(f'eps_mono must be >= 0, got {eps_mono}')
    return IntermittencyVerdict(p_values, lambda_p, float(eps_mono))


#
# Diagnostics
#


@dataclass
class ContractionTable:
    '''
    Monte Carlo estimates of E|x(u, t) - x(v, t)|^(2p) against |u - v|^(2p).

    ``gronwall`` is the reference exp(-(2 alpha - B^2) t) |u - v|^2, for p = 1 only.
    '''

    p: float
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    bound: float
    gronwall: np.ndarray

    def within(self, k: float = 2.0) -> bool:
        return bool(np.all(self.mean <= self.bound + k * self.stderr + 1e-12))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                't': self.times,
                'mean': self.mean,
                'stderr': self.stderr,
                'bound': np.full(self.times.shape, self.bound),
                'gronwall': self.gronwall,
            }
        )


def contraction_table(
    trajectory: Trajectory, u_id: int, v_id: int, p: float, alpha: float, B: float
) -> ContractionTable:
    '''Contraction estimates from two tracked points of an existing trajectory.'''
    iu, iv = trajectory.point_index(u_id), trajectory.point_index(v_id)
    x = trajectory.ds['x'].values
    u0 = trajectory.ds['u0'].values
    distance = np.linalg.norm(x[:, :, iu] - x[:, :, iv], axis=-1) ** (2.0 * p)
    gap = float(np.linalg.norm(u0[iu] - u0[iv]))
    times = trajectory.times
    if p == 1:
        gronwall = np.exp(-(2.0 * alpha - B**2) * times) * gap**2
    else:
        gronwall = np.full(times.shape, np.nan)
    return ContractionTable(
        p=float(p),
        times=times,
        mean=distance.mean(axis=0),
        stderr=_stderr(distance, axis=0),
        bound=gap ** (2.0 * p),
        gronwall=gronwall,
    )


def contraction_diagnostic(
    model: ModelSpec,
    u,
    v,
    p: float,
    T: float,
    replicas: int,
    density: DensityModel,
    dt: float = 1e-2,
    N: int = 32,
    seed: int = 0,
    save_every: int = 1,
    threads: int = 1,
    batch_size: int = 16,
) -> ContractionTable:
    '''
    Run ``replicas`` realisations with u and v as probes and tabulate the contraction.

    Raises
    ------
    PreconditionError
        If the moment contraction lemma does not cover order p for this model.
    '''
    report = dissipativity_report(model)
    if not report.admits(p):
        raise PreconditionError(
            f'Contraction of order p = {p} is outside the admissible range (p_max = {report.p_max})'
        )
    if report.messages:
        warnings.warn('; '.join(report.messages), stacklevel=2)
    config = SimConfig(
        dt=dt,
        T=T,
        N=N,
        replicas=replicas,
        seed=seed,
        save_every=save_every,
        grid=0,
        batch_size=batch_size,
        store_particles=False,
    )
    trajectory = run(model, density, config, probes=[u, v], threads=threads)
    return contraction_table(trajectory, 0, 1, p, report.alpha, report.B)


@dataclass
class ClusteringSeries:
    '''gamma(mu_t^N, delta_{x(probe, t)}) at every snapshot of one replica.'''

    point_id: int
    replica: int
    times: np.ndarray
    gamma: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.times, 'gamma': self.gamma})


def clustering_diagnostic(
    trajectory: Trajectory, probe_id: int, replica: int | None = None
) -> ClusteringSeries:
    if not trajectory.has_particles:
        raise ConfigurationError('Clustering needs a trajectory saved with particle positions')
    r = trajectory.replica_index(replica)
    g = trajectory.point_index(probe_id)
    particles = trajectory.ds['particles'].values[r]
    x = trajectory.ds['x'].values[r, :, g]
    gamma = np.array(
        [gamma_to_dirac(EmpiricalMeasure(particles[i]), x[i]) for i in range(len(trajectory.times))]
    )
    return ClusteringSeries(probe_id, int(trajectory.replicas[r]), trajectory.times.copy(), gamma)


@dataclass
class MartingaleDecay:
    '''
    max over the tracked grid of |M_t| / t per replica, and its early/late comparison.

    ``values`` has shape (replica, time) and excludes t = 0.
    '''

    times: np.ndarray
    values: np.ndarray
    t_early: float
    t_late: float
    early: np.ndarray
    late: np.ndarray

    @property
    def fraction_decreased(self) -> float:
        if self.early.size == 0:
            return math.nan
        return float(np.mean(self.late < self.early))

    @property
    def median_early(self) -> float:
        return float(np.median(self.early))

    @property
    def median_late(self) -> float:
        return float(np.median(self.late))

    @property
    def decreasing(self) -> bool:
        return self.median_late <= self.median_early

    def to_dict(self) -> dict:
        return {
            't_early': self.t_early,
            't_late': self.t_late,
            'median_early': self.median_early,
            'median_late': self.median_late,
            'fraction_decreased': self.fraction_decreased,
            'decreasing': self.decreasing,
        }


def martingale_decay_check(
    trajectory: Trajectory, t_early: float | None = None, t_late: float | None = None
) -> MartingaleDecay:
    '''
    Compare sup_u |M_t(u)| / t at t_late (default T) with t_early (default T / 4).

    The supremum runs over the quadrature grid, or over all tracked points when
    there is no grid.
    '''
    times = trajectory.times
    T = float(times[-1])
    t_late = T if t_late is None else t_late
    t_early = T / 4.0 if t_early is None else t_early
    i_early, i_late = trajectory.time_index(t_early), trajectory.time_index(t_late)
    if not 0 < i_early < i_late:
        raise PreconditionError(f'Need 0 < t_early < t_late, got {t_early} and {t_late}')

    columns = trajectory.grid_indices
    if columns.size == 0:
        columns = np.arange(trajectory.point_ids.size)
    mart = np.abs(trajectory.ds['logdet_mart'].values[:, 1:][:, :, columns])
    values = mart.max(axis=-1) / times[1:]
    return MartingaleDecay(
        times=times[1:],
        values=values,
        t_early=float(times[i_early]),
        t_late=float(times[i_late]),
        early=values[:, i_early - 1],
        late=values[:, i_late - 1],
    )
