import math

import numpy as np
import pandas as pd
import pytest

from interaction_flows.errors import FlowError, StageDependencyError
from interaction_flows.tools import (
    md5sum,
    read_csv,
    read_json,
    read_points_csv,
    read_trajectory_nc,
    trajectory_frame,
    write_csv,
    write_json,
    write_trajectory_csv,
    write_trajectory_nc,
)


def test_md5sum(tmp_path):
    path = tmp_path / 'abc.txt'
    path.write_bytes(b'abc')
    assert md5sum(path) == '900150983cd24fb0d6963f7d28e17f72'


def test_json_without_non_finite_numbers(tmp_path):
    path = write_json({'b': math.inf, 'a': [1.0, math.nan], 'n': np.int64(3)}, tmp_path / 'out.json')
    assert read_json(path) == {'a': [1.0, 'nan'], 'b': 'inf', 'n': 3}
    assert path.read_text().index('"a"') < path.read_text().index('"b"')
    assert not (tmp_path / 'out.json.tmp').exists()


def test_missing_inputs_name_the_stage(tmp_path):
    with pytest.raises(StageDependencyError, match="run the 'simulate' stage first"):
        read_csv(tmp_path / 'moments.csv', stage='simulate')
    with pytest.raises(FlowError):
        read_json(tmp_path / 'lyapunov.json', stage='lyapunov')
    with pytest.raises(FileNotFoundError):
        read_trajectory_nc(tmp_path / 'trajectory.nc')


def test_csv_keeps_full_precision(tmp_path):
    frame = pd.DataFrame({'t': [0.1, 1.0 / 3.0]})
    path = write_csv(frame, tmp_path / 'frame.csv')
    assert read_csv(path)['t'].tolist() == [0.1, 1.0 / 3.0]


def test_trajectory_round_trip(tmp_path, contraction_trajectory):
    path = write_trajectory_nc(contraction_trajectory, tmp_path / 'trajectory.nc')
    loaded = read_trajectory_nc(path)
    np.testing.assert_array_equal(loaded.times, contraction_trajectory.times)
    np.testing.assert_array_equal(loaded.log_det(), contraction_trajectory.log_det())
    np.testing.assert_array_equal(loaded.grid_indices, contraction_trajectory.grid_indices)
    assert loaded.has_particles
    assert loaded.sim_config == contraction_trajectory.sim_config


def test_trajectory_csv(tmp_path, contraction_trajectory):
    csv_file, header_file = write_trajectory_csv(contraction_trajectory, tmp_path / 'trajectory.csv')
    frame = read_csv(csv_file)
    header = read_json(header_file)
    assert list(frame.columns) == header['columns']
    assert list(frame.columns) == ['replica', 't', 'point_id', 'x_1', 'logdet_bv', 'logdet_mart']
    assert len(frame) == len(trajectory_frame(contraction_trajectory)) == 21 * 10
    assert len(header['points']) == 10
    assert sum(point['grid'] for point in header['points']) == 8


def test_points_with_and_without_header(tmp_path):
    plain = tmp_path / 'plain.csv'
    plain.write_text('0,1\n2,3\n')
    labelled = tmp_path / 'labelled.csv'
    labelled.write_text('x,y\n0,1\n2,3\n')
    np.testing.assert_array_equal(read_points_csv(plain), [[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(read_points_csv(labelled), [[0.0, 1.0], [2.0, 3.0]])
    with pytest.raises(FileNotFoundError):
        read_points_csv(tmp_path / 'nope.csv')
