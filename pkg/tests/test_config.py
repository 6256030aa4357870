import json

import pytest

from interaction_flows.config import (
    RECIPES,
    build_density,
    build_model,
    build_sim_config,
    load_experiment,
    parse_config,
    recipe,
)
from interaction_flows.errors import ConfigurationError, ConfigValidationError


def minimal(**blocks) -> dict:
    raw = {
        'model': {'d': 1, 'kernel': {'A': [[1.0]]}},
        'sim': {'dt': 0.01, 'T': 1.0, 'N': 8},
    }
    raw.update(blocks)
    return raw


def test_defaults_are_filled_in():
    config = parse_config(minimal())
    assert config.name == 'experiment'
    assert config.model.kernel == 'linear'
    assert config.model.diffusion == 'none'
    assert config.density.lo == [0.0]
    assert config.density.hi == [1.0]
    assert config.sim.replicas == 1
    assert config.sim.save_every == 10
    assert config.analysis.p_grid == (1.5, 2.0, 3.0, 4.0)
    assert config.analysis.eps_mono == 1e-3
    assert config.warnings == ()

    assert build_model(config.model).d == 1
    assert build_density(config.density).d == 1
    assert build_sim_config(config.sim).n_steps == 100


def test_all_violations_are_reported():
    raw = minimal(sim={'dt': 0, 'T': 1.0, 'N': 8})
    raw['model']['colour'] = 'red'
    raw['analysis'] = {'p_grid': [2.0, 1.5, 3.0]}
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(raw)
    violations = excinfo.value.violations
    assert any(v.startswith('sim.dt') for v in violations)
    assert 'model.colour: unknown key' in violations
    assert any(v.startswith('analysis.p_grid') for v in violations)


def test_matrix_dimensions_are_checked():
    raw = minimal()
    raw['model'] = {'d': 2, 'kernel': {'A': [1.0, 0.0, 0.0]}}
    with pytest.raises(ConfigValidationError, match='model.kernel.A'):
        parse_config(raw)


def test_flat_matrices_are_row_major():
    raw = minimal()
    raw['model'] = {'d': 2, 'kernel': {'A': [1.0, 0.5, 0.0, 2.0]}}
    assert parse_config(raw).model.A == [[1.0, 0.5], [0.0, 2.0]]


def test_stiff_step_is_rejected():
    raw = minimal()
    raw['model']['kernel']['A'] = [[100.0]]
    with pytest.raises(ConfigValidationError) as excinfo:
        parse_config(raw)
    assert excinfo.value.violations[0].startswith('sim.dt: ')


def test_contraction_outside_lemma_range_warns():
    raw = minimal(
        analysis={'contraction': {'u': [0.2], 'v': [0.8], 'p': 1}},
    )
    raw['model']['diffusion'] = {'variant': 'mean_reverting', 'C': [[[0.0]]], 'B': 2.0}
    with pytest.warns(UserWarning, match='p_max = 0'):
        config = parse_config(raw)
    assert len(config.warnings) == 1


def test_name_comes_from_file_stem(tmp_path):
    path = tmp_path / 'my_run.json'
    path.write_text(json.dumps(minimal()))
    assert parse_config(path).name == 'my_run'
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / 'missing.json')


def test_invalid_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"model": ')
    with pytest.raises(ConfigValidationError, match='invalid JSON'):
        parse_config(path)


def test_bundled_recipes_parse():
    for name in RECIPES:
        config = load_experiment(name)
        assert config.name == name
        assert recipe(name)['name'] == name
    assert load_experiment('contraction.json').sim.N == 256
    with pytest.raises(ConfigurationError):
        recipe('unknown')


def test_overrides_replace_seed_and_replicas():
    config = parse_config(minimal())
    changed = config.with_overrides(seed=5, replicas=3)
    assert (changed.sim.seed, changed.sim.replicas) == (5, 3)
    assert config.sim.seed == 0
    assert changed.canonical_json() != config.canonical_json()
    assert config.with_overrides().canonical_json() == config.canonical_json()
    with pytest.raises(ConfigurationError):
        config.with_overrides(replicas=0)
