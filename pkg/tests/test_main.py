import csv
import json

import pytest

from qtraj import main as main_module
from qtraj.main import CONFIG_EXIT, DRIFT_EXIT, SEED_ENV, main, package_version, parse_seed, parse_strategy
from qtraj.config import ConfigException
from qtraj.model import ControlInterval
from qtraj.records import TRAJECTORY_HEADER

from conftest import DESK_DOC


@pytest.fixture
def desk_file(tmp_path):
    path = tmp_path / 'desk.json'
    path.write_text(json.dumps(DESK_DOC))
    return path


@pytest.fixture
def cost_file(tmp_path):
    path = tmp_path / 'cost.json'
    path.write_text(json.dumps({
        'running': {'form': 'quadratic_control', 'weight': 0.01},
        'terminal': {'form': 'bloch_linear', 'offset': 1.0, 'weights': [-1.0, 0.0, 0.0]},
    }))
    return path


def _discrete(desk_file, out, *extra):
    return main([
        'simulate-discrete', '--model', str(desk_file), '--out', str(out), '--n', '16', '--samples', '5',
        '--strategy', 'markov:bloch_y_gain:0.5', '--seed', '42', *extra,
    ])


def test_simulate_discrete(isolated_config, desk_file, tmp_path):
    out = tmp_path / 'run'
    assert _discrete(desk_file, out) == 0

    with open(out / 'trajectories.csv', newline='') as fd:
        rows = list(csv.reader(fd))
    assert rows[0] == TRAJECTORY_HEADER
    assert len(rows) == 1 + 5 * 17
    assert rows[1][6] == '' and rows[1][7] == ''
    assert rows[2][7] in ('0', '1')

    run = json.loads((out / 'run.json').read_text())
    assert run['config']['command'] == 'simulate-discrete'
    assert run['config']['seed'] == 42
    assert 'threads' not in run['config']
    assert 'mean_events' in run['results']


def test_reruns_are_byte_identical(isolated_config, desk_file, tmp_path):
    out = tmp_path / 'run'
    assert _discrete(desk_file, out, '--threads', '1') == 0
    first = {name: (out / name).read_bytes() for name in ('trajectories.csv', 'run.json')}

    assert _discrete(desk_file, out, '--threads', '3') == 0
    for name, data in first.items():
        assert (out / name).read_bytes() == data


def test_seed_from_environment(isolated_config, desk_file, tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, '0x2a')
    out = tmp_path / 'env'
    assert _discrete(desk_file, out, '--seed', '7') == 0
    assert json.loads((out / 'run.json').read_text())['config']['seed'] == 42

    monkeypatch.setenv(SEED_ENV, 'abc')
    assert _discrete(desk_file, out) == CONFIG_EXIT


def test_version_when_not_installed(isolated_config, desk_file, tmp_path, monkeypatch):
    def missing(name):
        raise main_module.importlib_metadata.PackageNotFoundError(name)

    monkeypatch.setattr(main_module.importlib_metadata, 'version', missing)
    assert package_version() == 'unknown'

    out = tmp_path / 'uninstalled'
    assert _discrete(desk_file, out) == 0
    assert json.loads((out / 'run.json').read_text())['config']['version'] == 'unknown'


def test_parse_seed():
    assert parse_seed('17') == 17
    assert parse_seed('0xff') == 255
    with pytest.raises(ConfigException, match="64-bit"):
        parse_seed(str(2 ** 64))
    with pytest.raises(ConfigException, match="integer"):
        parse_seed('1.5')


def test_parse_strategy():
    interval = ControlInterval(-1.0, 1.0)
    assert parse_strategy('det:const:0.25', interval).name == 'det:const:0.25'
    assert parse_strategy('det:zero', interval) is not None
    assert parse_strategy('det:sin:2', interval) is not None

    for bad in ('det:const', 'det:const:x', 'markov:bloch_w_gain:1', 'greedy'):
        with pytest.raises(ConfigException):
            parse_strategy(bad, interval)


def test_bad_strategy_exit_code(isolated_config, desk_file, tmp_path, capsys):
    assert _discrete(desk_file, tmp_path / 'bad', '--strategy', 'greedy') == CONFIG_EXIT
    assert "Unknown strategy" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit) as ex:
        main(['teleport'])
    assert ex.value.code == 2


def test_missing_model(isolated_config, tmp_path):
    assert main([
        'simulate-discrete', '--model', str(tmp_path / 'missing.json'), '--out', str(tmp_path / 'o'), '--n', '4',
    ]) == CONFIG_EXIT


def test_drift_exit_code(isolated_config, tmp_path, capsys):
    model = tmp_path / 'strong.json'
    model.write_text(json.dumps({'H': 'zero', 'C': {'scale': 50, 'matrix': 'sigma_minus'}}))
    assert main([
        'simulate-diffusive', '--model', str(model), '--out', str(tmp_path / 'o'), '--dt', '0.01', '--t', '0.1',
    ]) == DRIFT_EXIT
    assert "dt = 0.01" in capsys.readouterr().out


def test_simulate_jump(isolated_config, desk_file, tmp_path):
    out = tmp_path / 'jump'
    assert main([
        'simulate-jump', '--model', str(desk_file), '--out', str(out), '--ode-dt', '0.01', '--samples', '20',
        '--every', '10',
    ]) == 0
    with open(out / 'jumps.csv', newline='') as fd:
        rows = list(csv.reader(fd))
    assert rows[0] == ['sample', 'jump_time']
    # The desk model at u = 0 emits at most one photon per path.
    samples = [r[0] for r in rows[1:]]
    assert len(samples) == len(set(samples))

    run = json.loads((out / 'run.json').read_text())
    assert run['config']['ode_dt'] == 0.01
    assert run['results']['photons']['samples'] == 20


def test_config_defaults(isolated_config, desk_file, tmp_path):
    isolated_config.write_text('[integrator]\ndiffusive_dt = 0.005\n')
    out = tmp_path / 'diffusive'
    assert main([
        'simulate-diffusive', '--model', str(desk_file), '--out', str(out), '--t', '0.05', '--every', '5',
    ]) == 0
    config = json.loads((out / 'run.json').read_text())['config']
    assert config['dt'] == 0.005
    assert config['repair_factor'] == 100.0
    assert config['digits'] == 17


def test_bad_config_value(isolated_config, desk_file, tmp_path, capsys):
    isolated_config.write_text('[output]\ndigits = many\n')
    assert _discrete(desk_file, tmp_path / 'o') == CONFIG_EXIT
    assert "[output] digits" in capsys.readouterr().out


def test_config_file_command(isolated_config, capsys):
    assert main(['config-file']) == 0
    assert capsys.readouterr().out.strip() == str(isolated_config)


def test_hjb_exact_tree_matches_brute_force(isolated_config, desk_file, cost_file, tmp_path):
    values = []
    for method in ('--exact-tree', '--brute-force'):
        out = tmp_path / method.strip('-')
        assert main([
            'hjb', '--model', str(desk_file), '--obs', 'nondiagonal', '--cost', str(cost_file), '--out', str(out),
            '--horizon', '2', '--n', '4', '--controls', '3', method,
        ]) == 0
        values.append(json.loads((out / 'run.json').read_text())['results']['value'])
    assert values[0] == pytest.approx(values[1], abs=1e-12)


def test_hjb_grid(isolated_config, desk_file, cost_file, tmp_path):
    out = tmp_path / 'grid'
    assert main([
        'hjb', '--model', str(desk_file), '--cost', str(cost_file), '--out', str(out), '--horizon', '2', '--n', '4',
        '--controls', '3', '--grid-spacing', '0.5',
    ]) == 0
    with open(out / 'value_grid.csv', newline='') as fd:
        rows = list(csv.reader(fd))
    assert rows[0] == ['k', 'x', 'y', 'z', 'V', 'u']
    terminal = [r for r in rows[1:] if r[0] == '2']
    assert terminal and all(r[5] == '' for r in terminal)

    results = json.loads((out / 'run.json').read_text())['results']
    assert results['interpolation_budget'] >= 0.0
    assert 'value' in results


def test_hjb_rejects_missing_cost(isolated_config, desk_file, tmp_path):
    assert main([
        'hjb', '--model', str(desk_file), '--cost', str(tmp_path / 'none.json'), '--out', str(tmp_path / 'o'),
        '--horizon', '1',
    ]) == CONFIG_EXIT


def test_evaluate_policy(isolated_config, desk_file, cost_file, tmp_path):
    out = tmp_path / 'eval'
    assert main([
        'evaluate-policy', '--model', str(desk_file), '--cost', str(cost_file), '--out', str(out),
        '--horizon', '2', '--n', '4', '--samples', '200', '--strategy', 'det:const:0.5',
    ]) == 0
    results = json.loads((out / 'run.json').read_text())['results']
    assert results['se'] >= 0.0
    assert 'bound_holds' not in results


def test_fluorescence_dark_laser(isolated_config, tmp_path):
    out = tmp_path / 'fl'
    assert main([
        'fluorescence', '--out', str(out), '--n', '64', '--t', '2', '--ode-dt', '0.01', '--samples', '30',
        '--every', '8',
    ]) == 0
    results = json.loads((out / 'run.json').read_text())['results']
    for level in ('discrete', 'limit'):
        assert set(results[level]['histogram']) <= {'0', '1'}
    assert (out / 'discrete_trajectories.csv').exists()
    assert (out / 'limit_jumps.csv').exists()
