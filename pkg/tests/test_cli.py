"""
Tests for the batch driver.

Validates:
1. Config validation names the offending key and exits with code 1
2. Numerical failures exit with code 2 and write error.json
3. Successful runs write hashed artifacts and a manifest
4. CSV artifacts are byte-identical across runs and worker counts
5. Output directory precedence: --out, OUTPUT_DIR, output.directory
"""

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from cli.analysis import PLOT_COLUMNS, emit_plot_data, series_frame
from cli.config import ExperimentConfig, config_hash, format_validation_error, load_config
from cli.main import build_parser, main
from cli.perf import resolve_workers
from cli.runner import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, resolve_output_dir, run

DATA = Path(__file__).resolve().parents[1] / 'data'
TREES = DATA / 'trees'

PUT_CONFIG = {
    'model': {'variant': 'stylized', 'preset': 'stylized_base'},
    'grid': {'t0': 0.0, 'T': 10.0, 'n_steps': 1},
    'mc': {'n_paths': 5000, 'master_seed': 11},
    'task': {'name': 'price-put', 'strikes': [0.5, 1.0, 2.0], 'monte_carlo': True},
}

BOUNDARY_CONFIG = {
    'model': {'variant': 'random_scaling', 'random_scaling': {'bessel_dim': 2.1, 'z0': 1.0, 'gamma0': 10.0}},
    'grid': {'T': 1.0, 'n_steps': 1},
    'mc': {'n_paths': 2000, 'master_seed': 5},
    'task': {'name': 'simulate'},
}


def _write(tmp_path, payload, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def _error(out_dir):
    return json.loads((out_dir / 'error.json').read_text())


# ==========================================
# CONFIG
# ==========================================

def test_unknown_key_is_named():
    bad = dict(PUT_CONFIG, model={'variant': 'stylized', 'stylized': {'alpha0': 0.05, 'beta': 0.05, 'alpha1': 1}})
    with pytest.raises(ValidationError) as info:
        ExperimentConfig.model_validate(bad)
    assert 'model.stylized.alpha1' in format_validation_error(info.value)


def test_section_rules():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({'task': {'name': 'simulate'}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({'task': {'name': 'tree-lab', 'tree': 'x.json'}})
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(dict(BOUNDARY_CONFIG, task={'name': 'price-zcb'}))
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(dict(PUT_CONFIG, model={'variant': 'stylized'}))
    # tree-lab needs no model, grid or mc
    config = ExperimentConfig.model_validate({'task': {'name': 'tree-lab', 'tree': 't.json', 'claim': 'c'}})
    assert config.model is None


def test_preset_variant_mismatch():
    config = ExperimentConfig.model_validate(dict(BOUNDARY_CONFIG, model={'variant': 'random_scaling',
                                                                         'preset': 'stylized_base'}))
    with pytest.raises(ValueError):
        config.model.params()


def test_config_hash_is_canonical():
    a = ExperimentConfig.model_validate(PUT_CONFIG)
    b = ExperimentConfig.model_validate(dict(PUT_CONFIG, output={'directory': 'runs'}))
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    c = ExperimentConfig.model_validate(dict(PUT_CONFIG, mc={'n_paths': 5000, 'master_seed': 12}))
    assert config_hash(a) != config_hash(c)


def test_shipped_configs_validate():
    for path in sorted((DATA / 'configs').glob('*.json')):
        config = load_config(path)
        assert path.stem.replace('_', '-') == config.task.name


# ==========================================
# EXIT CODES
# ==========================================

def test_invalid_config_exits_1(tmp_path):
    bad = dict(PUT_CONFIG, grid={'T': 10.0, 'n_steps': 1, 'dt': 0.1})
    assert run(_write(tmp_path, bad), out=str(tmp_path)) == EXIT_INPUT
    error = _error(tmp_path)
    assert error['code'] == 1
    assert 'grid.dt' in error['detail']


def test_missing_file_and_task_mismatch_exit_1(tmp_path):
    assert run(tmp_path / 'missing.json', out=str(tmp_path)) == EXIT_INPUT
    assert 'FileNotFoundError' in _error(tmp_path)['detail']

    path = _write(tmp_path, PUT_CONFIG)
    assert run(path, task='simulate', out=str(tmp_path)) == EXIT_INPUT
    assert _error(tmp_path)['task'] == 'simulate'


def test_boundary_hit_exits_2(tmp_path):
    assert run(_write(tmp_path, BOUNDARY_CONFIG), out=str(tmp_path)) == EXIT_NUMERICAL
    error = _error(tmp_path)
    assert error['code'] == 2
    assert error['detail'].startswith('BoundaryHitError')
    print("✓ Boundary hit reported with exit code 2")


# ==========================================
# ARTIFACTS
# ==========================================

def test_tree_lab_run_writes_manifest(tmp_path):
    config = {'task': {'name': 'tree-lab', 'tree': str(TREES / 'coarsened_binomial.json'),
                       'claim': 'coin_weighted'}}
    out = tmp_path / 'out'
    assert run(_write(tmp_path, config), out=str(out)) == EXIT_OK

    manifest = json.loads((out / 'manifest.json').read_text())
    stem = f"tree_lab_{manifest['config_hash']}"
    assert manifest['artifacts'] == [f'{stem}.csv', f'{stem}.json', f'{stem}_plot.csv']
    assert all((out / name).exists() for name in manifest['artifacts'])
    assert manifest['master_seed'] is None

    report = json.loads((out / f'{stem}.json').read_text())
    assert float(report['h0']) == 1.0
    assert report['brute_force']['passed']
    assert report['incomplete_info']['passed']


def test_shipped_tree_config_resolves_relative_tree(tmp_path):
    assert run(DATA / 'configs' / 'tree_lab.json', out=str(tmp_path)) == EXIT_OK


def test_csv_is_byte_identical_across_worker_counts(tmp_path):
    path = _write(tmp_path, PUT_CONFIG)
    outputs = []
    for i, threads in enumerate((1, 1, 2)):
        out = tmp_path / f'run{i}'
        assert run(path, threads=threads, out=str(out)) == EXIT_OK
        manifest = json.loads((out / 'manifest.json').read_text())
        outputs.append((out / manifest['artifacts'][0]).read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
    assert outputs[0].endswith(b'\n') and b'\r' not in outputs[0]


def test_output_formats(tmp_path):
    config = dict(PUT_CONFIG, task={'name': 'price-put', 'strikes': [1.0]},
                  output={'formats': ['json'], 'plot_data': False})
    assert run(_write(tmp_path, config), out=str(tmp_path / 'o')) == EXIT_OK
    manifest = json.loads((tmp_path / 'o' / 'manifest.json').read_text())
    assert len(manifest['artifacts']) == 1 and manifest['artifacts'][0].endswith('.json')


def test_output_dir_precedence(monkeypatch, tmp_path):
    config = ExperimentConfig.model_validate(dict(PUT_CONFIG, output={'directory': 'from_config'}))
    monkeypatch.delenv('OUTPUT_DIR', raising=False)
    assert resolve_output_dir(None, config) == Path('from_config')
    monkeypatch.setenv('OUTPUT_DIR', str(tmp_path / 'env'))
    assert resolve_output_dir(None, config) == tmp_path / 'env'
    assert resolve_output_dir(str(tmp_path / 'cli'), config) == tmp_path / 'cli'


# ==========================================
# ENTRY POINT AND HELPERS
# ==========================================

def test_main_returns_exit_code(tmp_path):
    config = _write(tmp_path, {'task': {'name': 'tree-lab', 'tree': str(TREES / 'trinomial.json'),
                                        'claim': 'top_leaf'}})
    assert main(['tree-lab', '--config', str(config), '--out', str(tmp_path / 'out')]) == EXIT_OK
    assert main(['tree-lab', '--config', str(config), '--out', str(tmp_path / 'out'), '--threads', '0']) == EXIT_INPUT
    with pytest.raises(SystemExit):
        build_parser().parse_args(['not-a-task', '--config', 'x.json'])


def test_plot_data_helpers():
    assert list(emit_plot_data([]).columns) == PLOT_COLUMNS
    frame = emit_plot_data([series_frame('a', [0, 1], [2.0, 3.0]), series_frame('b', [0], [1.0], [0.1])])
    assert list(frame['series']) == ['a', 'a', 'b']
    assert frame['y_stderr'].iloc[0] == 0.0
    with pytest.raises(ValueError):
        series_frame('bad', [0, 1], [1.0])


def test_resolve_workers():
    assert resolve_workers(3) == 3
    assert 1 <= resolve_workers(None) <= 8
    with pytest.raises(ValueError):
        resolve_workers(0)
