'''
Experiment orchestration.

An experiment runs in stages, each reading the outputs of the previous ones from
the experiment's output directory:

    simulate       trajectory.nc, trajectory.csv, trajectory.json
    moments        moments.csv, density_profile.csv
    lyapunov       lyapunov.json (+ contraction.csv, clustering.csv when requested)
    intermittency  intermittency.json
    summary        summary.json, manifest.json

Outputs are a function of the configuration and the seed only; the number of
threads changes the wall-clock time and nothing else.
'''

import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from interaction_flows import __version__
from interaction_flows.asymptotics import (
    MomentSeries,
    clustering_diagnostic,
    contraction_diagnostic,
    fit_moment_lyapunov,
    intermittency_verdict,
    laplace_moment_prediction,
    martingale_decay_check,
    pointwise_lyapunov,
    printed_example_condition,
    slope_relation_check,
    theorem_condition,
)
from interaction_flows.config import (
    ExperimentConfig,
    build_density,
    build_model,
    build_sim_config,
)
from interaction_flows.density import density_profile, moment_series_all
from interaction_flows.determinant import identity_suite, liouville_discrepancies
from interaction_flows.errors import (
    FlowError,
    InvalidModelError,
    NotApplicableError,
    PreconditionError,
)
from interaction_flows.integrator import run
from interaction_flows.kernels import dissipativity_report
from interaction_flows.tools import (
    md5sum,
    read_csv,
    read_json,
    read_trajectory_nc,
    write_csv,
    write_json,
    write_trajectory_csv,
    write_trajectory_nc,
)

logger = logging.getLogger(__name__)

OUT_DIR_ENV = 'INTERACTION_FLOWS_OUT_DIR'

TRAJECTORY_NC = 'trajectory.nc'
TRAJECTORY_CSV = 'trajectory.csv'
TRAJECTORY_JSON = 'trajectory.json'
MOMENTS_CSV = 'moments.csv'
PROFILE_CSV = 'density_profile.csv'
LYAPUNOV_JSON = 'lyapunov.json'
CONTRACTION_CSV = 'contraction.csv'
CLUSTERING_CSV = 'clustering.csv'
INTERMITTENCY_JSON = 'intermittency.json'
IDENTITIES_CSV = 'identities.csv'
SUMMARY_JSON = 'summary.json'
MANIFEST_JSON = 'manifest.json'
REPORT_CSV = 'report.csv'


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, 'out'))


def experiment_dir(config: ExperimentConfig, out_dir: Path) -> Path:
    return Path(out_dir) / config.name


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.md5(config.canonical_json().encode()).hexdigest()


#
# Stages
#


def simulate_stage(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> dict:
    '''Integrate all replicas and write the trajectory files.'''
    model = build_model(config.model)
    density = build_density(config.density)
    sim = build_sim_config(config.sim)
    probes = [list(p) for p in config.analysis.probes] or None

    logger.info(
        'Simulating %s: %d replica(s), %d steps, N = %d', config.name, sim.replicas, sim.n_steps, sim.N
    )
    trajectory = run(model, density, sim, probes=probes, threads=threads, on_failure='record')
    for failure in trajectory.failures:
        logger.warning('Replica %d failed: %s', failure['replica'], failure['message'])

    target = experiment_dir(config, out_dir)
    nc_file = write_trajectory_nc(trajectory, target / TRAJECTORY_NC)
    csv_file, header_file = write_trajectory_csv(trajectory, target / TRAJECTORY_CSV)
    logger.info('Wrote %s', csv_file)
    return {
        'trajectory_nc': nc_file,
        'trajectory_csv': csv_file,
        'trajectory_json': header_file,
        'failures': trajectory.failures,
        'replicas': trajectory.replicas.tolist(),
    }


def moments_stage(config: ExperimentConfig, out_dir: Path) -> dict:
    '''ln M_p(t) for p = 1 and the analysis p grid, and the density profile of the first replica.'''
    target = experiment_dir(config, out_dir)
    trajectory = read_trajectory_nc(target / TRAJECTORY_NC)
    p_list = [1.0] + [float(p) for p in config.analysis.p_grid]

    rows = []
    series_list = moment_series_all(trajectory, p_list) if trajectory.grid_indices.size else []
    for series in series_list:
        for p in p_list:
            log_m = series.log_moments[p]
            rows.append(
                pd.DataFrame(
                    {
                        'replica': series.replica,
                        'p': p,
                        't': series.times,
                        'M_p': np.exp(log_m),
                        'ln_M_p': log_m,
                    }
                )
            )
    columns = ['replica', 'p', 't', 'M_p', 'ln_M_p']
    moments = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=columns)
    moments_file = write_csv(moments, target / MOMENTS_CSV)

    outputs = {'moments_csv': moments_file}
    if trajectory.replicas.size:
        profile = density_profile(trajectory)
        S, P = profile['density'].shape
        frame = {
            'replica': int(trajectory.replicas[0]),
            't': np.repeat(profile['times'], P),
            'point_id': np.tile(profile['point_ids'], S),
        }
        positions = profile['positions'].reshape(S * P, -1)
        for axis in range(positions.shape[1]):
            frame[f'x_{axis + 1}'] = positions[:, axis]
        frame['density'] = profile['density'].reshape(-1)
        outputs['density_profile_csv'] = write_csv(pd.DataFrame(frame), target / PROFILE_CSV)
    logger.info('Wrote %s', moments_file)
    return outputs


def _series_from_frame(moments: pd.DataFrame) -> list[MomentSeries]:
    series = []
    for replica, group in moments.groupby('replica', sort=True):
        log_moments = {}
        times = None
        for p, rows in group.groupby('p', sort=True):
            rows = rows.sort_values('t')
            times = rows['t'].to_numpy()
            log_moments[float(p)] = rows['ln_M_p'].to_numpy()
        series.append(MomentSeries(int(replica), times, log_moments))
    return series


def lyapunov_stage(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> dict:
    '''
    Pointwise Lyapunov exponents, the closed-form exponent, the growth conditions,
    the martingale decay check, the Liouville discrepancy and, when requested, the
    contraction and clustering diagnostics.
    '''
    target = experiment_dir(config, out_dir)
    trajectory = read_trajectory_nc(target / TRAJECTORY_NC)
    model = build_model(config.model)
    result: dict = {'unavailable': []}
    outputs = {}

    tracked = bool(trajectory.replicas.size and trajectory.point_ids.size)
    if tracked:
        report = pointwise_lyapunov(trajectory, burn_in=config.analysis.burn_in)
        result.update(report.to_dict())
        result['replica_lambda'] = report.samples.mean(axis=1).tolist()
        grid_ids = trajectory.point_ids[trajectory.grid_indices]
        if grid_ids.size:
            grid_report = pointwise_lyapunov(trajectory, grid_ids, burn_in=config.analysis.burn_in)
            result['laplace_prediction'] = laplace_moment_prediction(
                grid_report, config.analysis.p_grid
            ).tolist()
        discrepancy = liouville_discrepancies(trajectory)
        result['liouville_median_discrepancy'] = float(np.median(discrepancy))
    else:
        result['unavailable'].append('lambda_hat')

    try:
        condition = theorem_condition(model)
        result['closed_form_lambda'] = condition.value
        result['theorem_condition'] = condition.to_dict()
    except NotApplicableError as exc:
        result['closed_form_lambda'] = None
        result['theorem_condition'] = None
        result['unavailable'].append(f'closed_form_lambda: {exc}')
    try:
        result['printed_example_condition'] = printed_example_condition(model).to_dict()
    except NotApplicableError:
        result['printed_example_condition'] = None

    try:
        result['well_posedness'] = dissipativity_report(model, q=config.analysis.q).to_dict()
    except InvalidModelError as exc:
        result['well_posedness'] = None
        result['unavailable'].append(f'well_posedness: {exc}')

    if tracked:
        try:
            result['martingale_decay'] = martingale_decay_check(trajectory).to_dict()
        except FlowError as exc:
            result['martingale_decay'] = None
            result['unavailable'].append(f'martingale_decay: {exc}')

        probes = trajectory.probe_indices
        if probes.size and trajectory.has_particles:
            clustering = clustering_diagnostic(trajectory, int(trajectory.point_ids[probes[0]]))
            outputs['clustering_csv'] = write_csv(clustering.to_frame(), target / CLUSTERING_CSV)
            result['clustering_final'] = float(clustering.gamma[-1])

    contraction = config.analysis.contraction
    if contraction is not None:
        sim = config.sim
        try:
            table = contraction_diagnostic(
                model,
                contraction.u,
                contraction.v,
                contraction.p,
                T=sim.T,
                replicas=contraction.replicas or sim.replicas,
                density=build_density(config.density),
                dt=sim.dt,
                N=sim.N,
                seed=sim.seed,
                save_every=sim.save_every,
                threads=threads,
                batch_size=sim.batch_size,
            )
            outputs['contraction_csv'] = write_csv(table.to_frame(), target / CONTRACTION_CSV)
            result['contraction_within_2se'] = table.within(2.0)
        except (PreconditionError, InvalidModelError) as exc:
            result['contraction_within_2se'] = None
            result['unavailable'].append(f'contraction: {exc}')

    outputs['lyapunov_json'] = write_json(result, target / LYAPUNOV_JSON)
    logger.info('Wrote %s', outputs['lyapunov_json'])
    return outputs


def intermittency_stage(config: ExperimentConfig, out_dir: Path) -> dict:
    '''Moment Lyapunov exponents, the intermittency verdict and the slope relation.'''
    target = experiment_dir(config, out_dir)
    moments = read_csv(target / MOMENTS_CSV, stage='moments')
    lyapunov = read_json(target / LYAPUNOV_JSON, stage='lyapunov')
    analysis = config.analysis
    result: dict = {'unavailable': []}

    series = _series_from_frame(moments)
    fit = None
    if not series:
        result['unavailable'].append('lambda_p: no moment series available')
        result['verdict'] = None
    else:
        try:
            fit = fit_moment_lyapunov(series, analysis.p_grid, analysis.fit_window_fraction)
            lambda_1 = fit_moment_lyapunov(series, [1.0], analysis.fit_window_fraction)
        except PreconditionError as exc:
            result['unavailable'].append(f'lambda_p: {exc}')
            result['verdict'] = None

    if fit is not None:
        verdict = intermittency_verdict(fit.lambda_p, analysis.p_grid, analysis.eps_mono)
        result['fit'] = fit.to_dict()
        result.update(verdict.to_dict())
        result['lambda_1'] = float(lambda_1.lambda_p[0])

        if 'lambda_hat' in lyapunov:
            relation = slope_relation_check(lyapunov['lambda_hat'], fit, lyapunov['stderr'])
            result['slope_relation'] = relation.to_dict()
            implied = intermittency_verdict(
                -lyapunov['lambda_hat'] * (fit.p_values - 1.0), analysis.p_grid, analysis.eps_mono
            )
            result['implied_verdict'] = implied.label
    result['laplace_prediction'] = lyapunov.get('laplace_prediction')

    path = write_json(result, target / INTERMITTENCY_JSON)
    logger.info('Wrote %s', path)
    return {'intermittency_json': path}


def identities_stage(out_dir: Path, n_pairs: int = 100, seed: int = 0, method: str = 'fd') -> Path:
    '''Determinant identity suite as a pass/fail table.'''
    rows = identity_suite(n_pairs=n_pairs, seed=seed, method=method)
    frame = pd.DataFrame([row.to_dict() for row in rows])
    return write_csv(frame, Path(out_dir) / IDENTITIES_CSV)


def summarise(config: ExperimentConfig, out_dir: Path) -> dict:
    '''Collect the estimator outputs into the summary JSON.'''
    target = experiment_dir(config, out_dir)
    lyapunov = read_json(target / LYAPUNOV_JSON, stage='lyapunov')
    intermittency = read_json(target / INTERMITTENCY_JSON, stage='intermittency')
    header = read_json(target / TRAJECTORY_JSON, stage='simulate')
    moments = read_csv(target / MOMENTS_CSV, stage='moments')

    mass = moments[moments['p'] == 1.0]['M_p'].to_numpy()
    failures = header['failures']
    unavailable = list(lyapunov.get('unavailable', [])) + list(
        intermittency.get('unavailable', [])
    )
    if failures:
        unavailable.append(f'{len(failures)} replica(s) failed and are excluded')

    summary = {
        'name': config.name,
        'config_hash': config_hash(config),
        'seed': config.sim.seed,
        'replicas': config.sim.replicas,
        'replicas_failed': [f['replica'] for f in failures],
        'lambda_hat': lyapunov.get('lambda_hat'),
        'stderr': lyapunov.get('stderr'),
        'martingale_share': lyapunov.get('martingale_share'),
        'closed_form_lambda': lyapunov.get('closed_form_lambda'),
        'theorem_condition': lyapunov.get('theorem_condition'),
        'printed_example_condition': lyapunov.get('printed_example_condition'),
        'lambda_p': intermittency.get('lambda_p'),
        'p': intermittency.get('p'),
        'ratios': intermittency.get('ratios'),
        'margins': intermittency.get('margins'),
        'verdict': intermittency.get('verdict'),
        'eps_mono': config.analysis.eps_mono,
        'lambda_1': intermittency.get('lambda_1'),
        'slope_relation': intermittency.get('slope_relation'),
        'laplace_prediction': intermittency.get('laplace_prediction'),
        'mass_error': float(np.max(np.abs(mass - 1.0))) if mass.size else None,
        'liouville_median_discrepancy': lyapunov.get('liouville_median_discrepancy'),
        'martingale_decay': lyapunov.get('martingale_decay'),
        'contraction_within_2se': lyapunov.get('contraction_within_2se'),
        'clustering_final': lyapunov.get('clustering_final'),
        'well_posedness': lyapunov.get('well_posedness'),
        'warnings': list(config.warnings),
        'unavailable': unavailable,
    }
    write_json(summary, target / SUMMARY_JSON)
    return summary


#
# Whole experiment
#


@dataclass
class RunManifest:
    '''Provenance of one experiment run.'''

    name: str
    config_hash: str
    seed: int
    version: str
    replicas: list[int]
    threads: int
    outputs: dict[str, dict] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def output_hashes(self, suffix: str | None = None) -> dict[str, str]:
        return {
            name: entry['md5']
            for name, entry in self.outputs.items()
            if suffix is None or entry['path'].endswith(suffix)
        }

    def to_dict(self) -> dict:
        return asdict(self)


def run_experiment(
    config: ExperimentConfig,
    out_dir: Path | None = None,
    threads: int = 1,
    plot: bool = False,
) -> RunManifest:
    '''
    Run every stage of an experiment and write its manifest.

    Replica failures do not abort the run: they are recorded in the manifest and
    the summary marks the affected estimators as unavailable.
    '''
    out_dir = default_out_dir() if out_dir is None else Path(out_dir)
    target = experiment_dir(config, out_dir)
    timings = {}
    outputs: dict[str, Path] = {}

    start = time.perf_counter()
    simulated = simulate_stage(config, out_dir, threads=threads)
    timings['simulate'] = time.perf_counter() - start
    failures = simulated.pop('failures')
    replicas = simulated.pop('replicas')
    outputs.update(simulated)

    for name, stage in (
        ('moments', lambda: moments_stage(config, out_dir)),
        ('lyapunov', lambda: lyapunov_stage(config, out_dir, threads=threads)),
        ('intermittency', lambda: intermittency_stage(config, out_dir)),
    ):
        start = time.perf_counter()
        outputs.update(stage())
        timings[name] = time.perf_counter() - start

    summarise(config, out_dir)
    outputs['summary_json'] = target / SUMMARY_JSON

    if plot:
        outputs.update(plot_experiment(config, out_dir))

    manifest = RunManifest(
        name=config.name,
        config_hash=config_hash(config),
        seed=config.sim.seed,
        version=__version__,
        replicas=replicas,
        threads=threads,
        outputs={
            name: {'path': str(Path(path).resolve()), 'md5': md5sum(path)}
            for name, path in sorted(outputs.items())
        },
        timings=timings,
        failures=failures,
        warnings=list(config.warnings),
    )
    write_json(manifest.to_dict(), target / MANIFEST_JSON)
    logger.info('Experiment %s finished in %.2f s', config.name, math.fsum(timings.values()))
    return manifest


def plot_experiment(config: ExperimentConfig, out_dir: Path) -> dict:
    from interaction_flows import plotting

    target = experiment_dir(config, out_dir)
    outputs = {}
    moments = read_csv(target / MOMENTS_CSV, stage='moments')
    intermittency = read_json(target / INTERMITTENCY_JSON, stage='intermittency')
    lyapunov = read_json(target / LYAPUNOV_JSON, stage='lyapunov')

    outputs['moments_png'] = plotting.plot_moment_series(
        moments,
        title=f'{config.name}: moments',
        fit=intermittency.get('fit'),
        plot_path=target / 'moments.png',
    )
    if 'replica_lambda' in lyapunov:
        outputs['lyapunov_png'] = plotting.plot_lyapunov_samples(
            lyapunov['replica_lambda'],
            lyapunov['lambda_hat'],
            lyapunov['stderr'],
            reference=lyapunov.get('closed_form_lambda'),
            title=f'{config.name}: Lyapunov exponents',
            plot_path=target / 'lyapunov.png',
        )
    if (target / CLUSTERING_CSV).is_file():
        outputs['clustering_png'] = plotting.plot_clustering(
            read_csv(target / CLUSTERING_CSV),
            title=f'{config.name}: clustering',
            plot_path=target / 'clustering.png',
        )
    return outputs


REPORT_COLUMNS = [
    'name',
    'lambda_hat',
    'stderr',
    'closed_form_lambda',
    'verdict',
    'margin',
    'lambda_1',
    'mass_error',
    'replicas',
    'replicas_failed',
]


def report(out_dir: Path, plot: bool = False) -> Path:
    '''
    Aggregate the summaries of every experiment under ``out_dir`` into report.csv.

    Raises
    ------
    StageDependencyError
        If no experiment summary is found.
    '''
    out_dir = Path(out_dir)
    summaries = sorted(out_dir.glob(f'*/{SUMMARY_JSON}'))
    if not summaries:
        read_json(out_dir / '*' / SUMMARY_JSON, stage='run')
    rows = []
    for path in summaries:
        summary = read_json(path)
        margins = summary.get('margins') or []
        rows.append(
            {
                'name': summary['name'],
                'lambda_hat': summary.get('lambda_hat'),
                'stderr': summary.get('stderr'),
                'closed_form_lambda': summary.get('closed_form_lambda'),
                'verdict': summary.get('verdict'),
                'margin': min(margins) if margins else None,
                'lambda_1': summary.get('lambda_1'),
                'mass_error': summary.get('mass_error'),
                'replicas': summary.get('replicas'),
                'replicas_failed': len(summary.get('replicas_failed', [])),
            }
        )
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    path = write_csv(frame, out_dir / REPORT_CSV)
    if plot:
        from interaction_flows import plotting

        plotting.plot_verdicts(frame, plot_path=out_dir / 'report.png')
    return path
