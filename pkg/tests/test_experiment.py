import json

import pandas as pd
import pytest

from interaction_flows import experiment
from interaction_flows.config import RECIPES, build_sim_config, load_experiment, parse_config
from interaction_flows.errors import StageDependencyError


def small_noisy_config(**sim) -> dict:
    raw = {
        'name': 'small_noisy',
        'model': {
            'd': 1,
            'kernel': {'A': [[1.0]]},
            'diffusion': {'variant': 'mean_reverting', 'C': [[[0.3]]]},
        },
        'sim': {'dt': 0.01, 'T': 1.0, 'N': 8, 'replicas': 4, 'save_every': 5, 'grid': 8},
        'analysis': {'probes': [[0.5]]},
    }
    raw['sim'].update(sim)
    return raw


@pytest.fixture(scope='module')
def recipe_runs(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp('out')
    manifests = {
        name: experiment.run_experiment(load_experiment(name), out_dir)
        for name in ('contraction', 'nullmodel')
    }
    return out_dir, manifests


def summary_of(out_dir, name) -> dict:
    return json.loads((out_dir / name / experiment.SUMMARY_JSON).read_text())


def test_contraction_is_intermittent(recipe_runs):
    out_dir, manifests = recipe_runs
    assert manifests['contraction'].ok
    summary = summary_of(out_dir, 'contraction')
    assert summary['verdict'] == 'intermittent'
    assert summary['lambda_hat'] == pytest.approx(-1.0, abs=1e-2)
    assert summary['closed_form_lambda'] == pytest.approx(-1.0)
    assert summary['lambda_p'] == pytest.approx([0.5, 1.0, 2.0, 3.0], abs=1e-6)
    assert summary['lambda_1'] == pytest.approx(0.0, abs=1e-9)
    assert summary['mass_error'] < 1e-9
    assert summary['slope_relation']['within_3se']
    assert summary['well_posedness']['p_max'] == 'inf'
    assert summary['martingale_decay']['decreasing']
    assert summary['contraction_within_2se'] is None
    assert summary['unavailable'] == []

    clustering = pd.read_csv(out_dir / 'contraction' / experiment.CLUSTERING_CSV)
    assert clustering['gamma'].iloc[-1] < clustering['gamma'].iloc[0]
    assert summary['clustering_final'] == pytest.approx(clustering['gamma'].iloc[-1])


def test_null_model_is_not_intermittent(recipe_runs):
    out_dir, _ = recipe_runs
    summary = summary_of(out_dir, 'nullmodel')
    assert summary['verdict'] == 'not intermittent'
    assert summary['lambda_hat'] == pytest.approx(0.0, abs=1e-12)
    assert summary['lambda_p'] == pytest.approx([0.0, 0.0, 0.0, 0.0], abs=1e-12)
    assert summary['well_posedness'] is None
    assert any(entry.startswith('well_posedness') for entry in summary['unavailable'])


def test_manifest_lists_outputs(recipe_runs):
    out_dir, manifests = recipe_runs
    manifest = manifests['contraction']
    assert set(manifest.outputs) >= {
        'trajectory_nc',
        'trajectory_csv',
        'moments_csv',
        'lyapunov_json',
        'intermittency_json',
        'summary_json',
    }
    written = json.loads((out_dir / 'contraction' / experiment.MANIFEST_JSON).read_text())
    assert written['config_hash'] == manifest.config_hash
    assert written['failures'] == []


def test_report_aggregates_summaries(recipe_runs):
    out_dir, _ = recipe_runs
    frame = pd.read_csv(experiment.report(out_dir))
    assert frame['name'].tolist() == ['contraction', 'nullmodel']
    assert list(frame.columns) == experiment.REPORT_COLUMNS
    assert frame['verdict'].tolist() == ['intermittent', 'not intermittent']


def test_report_needs_summaries(tmp_path):
    with pytest.raises(StageDependencyError):
        experiment.report(tmp_path)


def test_rerun_reproduces_outputs(tmp_path):
    config = parse_config(small_noisy_config())
    first = experiment.run_experiment(config, tmp_path / 'a')
    second = experiment.run_experiment(config, tmp_path / 'b')
    for suffix in ('.csv', '.json'):
        assert first.output_hashes(suffix) == second.output_hashes(suffix)


def test_threads_do_not_change_outputs(tmp_path):
    config = parse_config(small_noisy_config(batch_size=2))
    serial = experiment.run_experiment(config, tmp_path / 'serial', threads=1)
    threaded = experiment.run_experiment(config, tmp_path / 'threaded', threads=3)
    assert serial.output_hashes('.csv') == threaded.output_hashes('.csv')


def test_seed_changes_outputs(tmp_path):
    config = parse_config(small_noisy_config())
    base = experiment.run_experiment(config, tmp_path / 'a')
    other = experiment.run_experiment(config.with_overrides(seed=1), tmp_path / 'b')
    assert base.output_hashes('moments.csv') != other.output_hashes('moments.csv')


def test_stages_need_their_inputs(tmp_path):
    config = parse_config(small_noisy_config())
    with pytest.raises(StageDependencyError, match='simulate'):
        experiment.moments_stage(config, tmp_path)
    experiment.simulate_stage(config, tmp_path)
    with pytest.raises(StageDependencyError, match='moments'):
        experiment.intermittency_stage(config, tmp_path)


def test_default_out_dir(monkeypatch, tmp_path):
    monkeypatch.setenv(experiment.OUT_DIR_ENV, str(tmp_path))
    assert experiment.default_out_dir() == tmp_path
    monkeypatch.delenv(experiment.OUT_DIR_ENV)
    assert str(experiment.default_out_dir()) == 'out'


def test_identity_table(tmp_path):
    path = experiment.identities_stage(tmp_path, n_pairs=5, seed=1)
    frame = pd.read_csv(path)
    assert frame['passed'].all()
    assert set(frame['d']) == {2, 3, 4, 5}


@pytest.mark.parametrize('name', RECIPES)
def test_recipes_conserve_mass(tmp_path, name):
    config = load_experiment(name).with_overrides(replicas=2)
    experiment.simulate_stage(config, tmp_path)
    experiment.moments_stage(config, tmp_path)
    moments = pd.read_csv(tmp_path / name / experiment.MOMENTS_CSV)
    mass = moments.loc[moments['p'] == 1.0, 'M_p']
    assert len(mass) == 2 * len(build_sim_config(config.sim).snapshot_times)
    assert (mass - 1.0).abs().max() <= 1e-3
