'''
Tools for reading and writing experiment files in netCDF, CSV and JSON format.

Every writer goes through a temporary file that replaces the target only once it
is complete, so an interrupted stage never leaves a truncated output behind.
'''

import hashlib
import json
import math
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pandas as pd
import xarray as xr

from interaction_flows.errors import StageDependencyError
from interaction_flows.integrator import Trajectory

# Shortest repr that round-trips a float64
FLOAT_FORMAT = '%.17g'


def atomic_write(path: Path, writer: Callable[[Path], None]) -> Path:
    '''
    Write a file through a temporary sibling and move it into place.

    Parameters
    ----------
    path : Path
        Final location of the file. Its directory is created if needed.
    writer : callable
        Called with the temporary path; must create the file there.

    Returns
    -------
    Path
        The resolved final path.
    '''
    path = Path(path).expanduser().resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + '.tmp')
    try:
        if temporary.exists():
            temporary.unlink()
        writer(temporary)
        temporary.replace(path)
    finally:
        if temporary.exists():
            temporary.unlink()
    return path


def md5sum(local_file: Path) -> str:
    '''Hexadecimal MD5 hash of a file, read in chunks.'''
    h = hashlib.md5()
    with open(local_file, 'rb') as f:
        for chunk in iter(lambda: f.read(8192), b''):
            h.update(chunk)
    return h.hexdigest()


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def _finite_or_string(value):
    '''JSON has no inf or nan; write them as strings.'''
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {k: _finite_or_string(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_finite_or_string(v) for v in value]
    return value


def write_json(data: dict, path: Path) -> Path:
    data = json.loads(json.dumps(data, default=_json_default))
    text = json.dumps(_finite_or_string(data), indent=2, sort_keys=True) + '\n'
    return atomic_write(path, lambda tmp: tmp.write_text(text))


def read_json(path: Path, stage: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        _missing(path, stage)
    return json.loads(path.read_text())


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    return atomic_write(
        path, lambda tmp: frame.to_csv(tmp, index=False, float_format=FLOAT_FORMAT)
    )


def read_csv(path: Path, stage: str | None = None) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        _missing(path, stage)
    return pd.read_csv(path)


def _missing(path: Path, stage: str | None):
    hint = f'; run the {stage!r} stage first' if stage else ''
    raise StageDependencyError(f'Required input does not exist: {path}{hint}')


#
# Trajectories
#


def write_trajectory_nc(trajectory: Trajectory, path: Path) -> Path:
    '''Full state (positions, Jacobians, log-determinant parts, particles) as netCDF.'''
    ds = trajectory.ds.copy()
    ds['x'].attrs['long_name'] = 'flow position x(u0, t)'
    ds['jacobian'].attrs['long_name'] = 'flow Jacobian Dx(u0, t)'
    ds['logdet_bv'].attrs['long_name'] = 'bounded-variation part of ln det Dx'
    ds['logdet_mart'].attrs['long_name'] = 'martingale part of ln det Dx'
    ds['p0'].attrs['long_name'] = 'initial density at u0'
    ds['weight'].attrs['long_name'] = 'quadrature weight (0 for probes)'
    return atomic_write(path, lambda tmp: ds.to_netcdf(tmp, mode='w', format='NETCDF4'))


def read_trajectory_nc(path: Path, stage: str | None = 'simulate') -> Trajectory:
    path = Path(path)
    if not path.is_file():
        _missing(path, stage)
    return Trajectory(xr.load_dataset(path))


def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    '''Long table with columns replica, t, point_id, x_1..x_d, logdet_bv, logdet_mart.'''
    ds = trajectory.ds
    R, S, P = ds.sizes['replica'], ds.sizes['time'], ds.sizes['point']
    replica, time, point = np.meshgrid(
        trajectory.replicas, trajectory.times, trajectory.point_ids, indexing='ij'
    )
    columns = {
        'replica': replica.reshape(-1),
        't': time.reshape(-1),
        'point_id': point.reshape(-1),
    }
    x = ds['x'].values.reshape(R * S * P, trajectory.d)
    for axis in range(trajectory.d):
        columns[f'x_{axis + 1}'] = x[:, axis]
    columns['logdet_bv'] = ds['logdet_bv'].values.reshape(-1)
    columns['logdet_mart'] = ds['logdet_mart'].values.reshape(-1)
    return pd.DataFrame(columns)


def trajectory_header(trajectory: Trajectory) -> dict:
    return {
        'columns': ['replica', 't', 'point_id']
        + [f'x_{i + 1}' for i in range(trajectory.d)]
        + ['logdet_bv', 'logdet_mart'],
        'model': trajectory.model,
        'density': json.loads(trajectory.ds.attrs['density']),
        'sim': trajectory.sim_config,
        'failures': trajectory.failures,
        'points': [
            {
                'point_id': int(g),
                'u0': u0.tolist(),
                'p0': float(p0),
                'weight': float(w),
                'grid': bool(is_grid),
            }
            for g, u0, p0, w, is_grid in zip(
                trajectory.point_ids,
                trajectory.ds['u0'].values,
                trajectory.ds['p0'].values,
                trajectory.ds['weight'].values,
                trajectory.ds['is_grid'].values,
                strict=True,
            )
        ],
    }


def write_trajectory_csv(trajectory: Trajectory, path: Path) -> tuple[Path, Path]:
    '''Trajectory dump as CSV plus a JSON header (same name, .json suffix).'''
    path = Path(path)
    csv_file = write_csv(trajectory_frame(trajectory), path)
    header_file = write_json(trajectory_header(trajectory), path.with_suffix('.json'))
    return csv_file, header_file


def read_points_csv(path: Path) -> np.ndarray:
    '''
    Points from a CSV file, one point per row, with or without a header line.

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    '''
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Point file does not exist: {path}')
    frame = pd.read_csv(path, header=None, comment='#')
    try:
        values = frame.to_numpy(dtype=np.float64)
    except ValueError:
        values = pd.read_csv(path, comment='#').to_numpy(dtype=np.float64)
    return values
