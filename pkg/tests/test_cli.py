import json
import os

import pytest
import yaml

from convexify import SampledFunction
from main import main
from mesh import P1Function
from records import ResultRecord


def _config(tmp_path, name='experiment.yaml', **data):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _record(out, command):
    return ResultRecord.load(os.path.join(out, command, 'record.json'))


def _error(capsys):
    err = capsys.readouterr().err
    line = next(l for l in reversed(err.splitlines()) if l.startswith('{'))
    return json.loads(line)


@pytest.fixture
def convexify_config(tmp_path):
    return _config(tmp_path, command='convexify', lagrangian='double_well',
                   sections={'convexify': {'radius': 2.0, 'counts': 4097, 'decompose': [0.0, 0.5]}})


def test_convexify_double_well(convexify_config, out_dir):
    assert main(['convexify', '--config', convexify_config, '--out', out_dir, '--workers', '1']) == 0
    record = _record(out_dir, 'convexify')
    assert record.headline['envelope_at_zero'] == pytest.approx(0.0, abs=5e-6)
    assert record.headline['envelope_gap'] == pytest.approx(1.0, abs=1e-9)
    assert record.headline['decompositions'] == 2
    assert record.headline['detached_radius'] == pytest.approx(1.0)
    for name in ('config.yaml', 'envelope.csv', 'hull.csv', 'decompositions.csv', 'envelope.svg'):
        assert os.path.isfile(os.path.join(out_dir, 'convexify', name))


def test_runs_are_reproducible(convexify_config, tmp_path, monkeypatch):
    from config import Config
    monkeypatch.setattr(Config, 'OUTPUT_OVERRIDE', None)
    outs = [str(tmp_path / 'first'), str(tmp_path / 'second')]
    for out in outs:
        assert main(['convexify', '--config', convexify_config, '--out', out, '--workers', '1']) == 0
    records = [_record(out, 'convexify') for out in outs]
    assert records[0].to_json(timestamps=False) == records[1].to_json(timestamps=False)
    for name in ('envelope.csv', 'envelope.svg'):
        first, second = (open(os.path.join(out, 'convexify', name)).read() for out in outs)
        assert first == second


def test_recover_convex_lagrangian(tmp_path, out_dir):
    path = _config(tmp_path, command='recover', lagrangian='g1^2', boundary='2*x',
                   sections={'recover': {'resolution': 8, 'levels': 2}})
    assert main(['recover', '--config', path, '--out', out_dir, '--workers', '1']) == 0
    record = _record(out_dir, 'recover')
    assert record.headline['pipeline'] == 'direct'
    assert record.headline['steps'] == 2
    assert record.headline['energy'] == pytest.approx(4.0, rel=1e-9)
    assert record.headline['max_sup_dev'] == pytest.approx(0.0, abs=1e-12)
    for name in ('certificates.json', 'certificates.csv', 'v_values.csv', 'convergence.svg'):
        assert os.path.isfile(os.path.join(out_dir, 'recover', name))


def test_recover_failure_keeps_record(tmp_path, out_dir, capsys):
    path = _config(tmp_path, command='recover', lagrangian='double_well', boundary='0',
                   sections={'recover': {'resolution': 4, 'levels': 1, 'K': 1.0}})
    assert main(['recover', '--config', path, '--out', out_dir, '--workers', '1']) == 3
    record = _record(out_dir, 'recover')
    assert record.failed
    assert record.diagnostic['error'] == 'margin_too_small'
    assert _error(capsys)['error'] == 'margin_too_small'


def test_bad_config_exits_2(tmp_path, out_dir, capsys):
    path = _config(tmp_path, command='convexify', lagrangian='double_well', colour='red')
    assert main(['convexify', '--config', path, '--out', out_dir]) == 2
    error = _error(capsys)
    assert error['error'] == 'config_error'
    assert error['kind'] == 'ConfigError'


def test_bad_expression_exits_2(tmp_path, out_dir, capsys):
    path = _config(tmp_path, command='convexify', lagrangian='(g1^2 - 1')
    assert main(['convexify', '--config', path, '--out', out_dir]) == 2
    assert _error(capsys)['error'] == 'syntax_error'


def test_config_needed(out_dir, capsys):
    assert main(['recover', '--out', out_dir]) == 2
    assert _error(capsys)['error'] == 'config_error'


def test_command_must_match_config(convexify_config, out_dir):
    assert main(['recover', '--config', convexify_config, '--out', out_dir]) == 2


def test_report(convexify_config, tmp_path, out_dir, capsys):
    assert main(['convexify', '--config', convexify_config, '--out', out_dir, '--workers', '1']) == 0
    capsys.readouterr()
    summary_dir = str(tmp_path / 'summary')
    assert main(['report', out_dir, '--out', summary_dir]) == 0
    table = capsys.readouterr().out
    assert 'convexify' in table
    assert '1 result record(s)' in table
    with open(os.path.join(summary_dir, 'summary.csv')) as f:
        header, row = f.read().splitlines()
    assert 'envelope_gap' in header.split(',')
    assert row.startswith('convexify,')


def test_report_without_records(tmp_path, out_dir):
    empty = tmp_path / 'empty'
    empty.mkdir()
    assert main(['report', str(empty), '--out', out_dir]) == 2


@pytest.fixture
def mania_config(tmp_path):
    return _config(tmp_path, 'mania.yaml', command='mania', sections={'mania': {
        'lipschitz': {'resolutions': [8, 16], 'cap': 4.0},
        'sobolev': {'kind': 'mapped', 'resolutions': [8, 16], 'gamma': 1 / 3, 'seeds': ['x^(1/3)']},
        'restarts': 2, 'max_iter': 200, 'relaxed': False,
    }})


def test_mania_regression_constant(mania_config, out_dir):
    args = ['mania', '--config', mania_config, '--out', out_dir, '--workers', '1']
    assert main(args) == 0
    first = _record(out_dir, 'mania')
    assert first.headline['gap_positive']
    assert first.headline['verdict'] == 'hypothesis not met'
    assert first.headline['regression_stable'] is None
    assert first.headline['first_cell_lower_bound'] > 0.0

    assert main(args) == 0
    second = _record(out_dir, 'mania')
    assert second.headline['regression_stable'] is True
    assert second.headline['lipschitz_plateau'] == first.headline['lipschitz_plateau']

    path = os.path.join(out_dir, 'mania', 'mania_regression.json')
    with open(path) as f:
        stored = json.load(f)
    stored['lipschitz_plateau'] *= 2
    with open(path, 'w') as f:
        json.dump(stored, f)
    assert main(args) == 3
    assert _record(out_dir, 'mania').diagnostic['error'] == 'regression_drift'


def test_samples_bin_feeds_a_sampled_lagrangian(convexify_config, tmp_path, out_dir):
    assert main(['convexify', '--config', convexify_config, '--out', out_dir, '--workers', '1']) == 0
    first = _record(out_dir, 'convexify')
    path = os.path.join(out_dir, 'convexify', 'samples.bin')
    with open(path, 'rb') as f:
        blob = f.read()
    samples = SampledFunction.from_bytes(blob)
    assert samples.counts == (4097,)
    assert samples.to_bytes() == blob

    again = _config(tmp_path, 'from_bin.yaml', command='convexify', lagrangian_file=path,
                    sections={'convexify': {'counts': 4097, 'decompose': [0.0, 0.5]}})
    second_out = str(tmp_path / 'second')
    assert main(['convexify', '--config', again, '--out', second_out, '--workers', '1']) == 0
    second = _record(second_out, 'convexify')
    assert second.headline['envelope_gap'] == pytest.approx(first.headline['envelope_gap'], abs=1e-12)
    assert second.headline['envelope_at_zero'] == pytest.approx(first.headline['envelope_at_zero'], abs=1e-12)


@pytest.fixture
def recover_config(tmp_path):
    return _config(tmp_path, 'recover.yaml', command='recover', lagrangian='double_well', boundary='0',
                   sections={'recover': {'resolution': 4, 'levels': 2}})


def test_recover_runs_are_reproducible(recover_config, tmp_path, monkeypatch):
    from config import Config
    monkeypatch.setattr(Config, 'OUTPUT_OVERRIDE', None)
    outs = [str(tmp_path / 'first'), str(tmp_path / 'second')]
    for out in outs:
        assert main(['recover', '--config', recover_config, '--out', out, '--workers', '1']) == 0
    records = [_record(out, 'recover') for out in outs]
    assert records[0].to_json(timestamps=False) == records[1].to_json(timestamps=False)
    for name in ('certificates.json', 'v_values.csv', 'convergence.svg'):
        first, second = (open(os.path.join(out, 'recover', name)).read() for out in outs)
        assert first == second


def test_recovery_files_reload_exactly(recover_config, tmp_path, out_dir):
    assert main(['recover', '--config', recover_config, '--out', out_dir, '--workers', '1']) == 0
    folder = os.path.join(out_dir, 'recover')
    files = {}
    for name in ('nodes.csv', 'cells.csv', 'values.csv'):
        with open(os.path.join(folder, f"v_{name}")) as f:
            files[name] = f.read()
    v = P1Function.from_csv(files)
    assert v.to_csv() == files

    chained = _config(tmp_path, 'chained.yaml', command='recover', lagrangian='g1^2',
                      sections={'recover': {'u_from': folder, 'levels': 1}})
    chained_out = str(tmp_path / 'chained')
    assert main(['recover', '--config', chained, '--out', chained_out, '--workers', '1']) == 0
    record = _record(chained_out, 'recover')
    # the sawtooth has slopes +-1 everywhere
    assert record.headline['energy'] == pytest.approx(1.0, rel=1e-9)
    assert record.headline['max_sup_dev'] == pytest.approx(0.0, abs=1e-12)


def test_recover_from_missing_files(tmp_path, out_dir, capsys):
    path = _config(tmp_path, command='recover', lagrangian='g1^2',
                   sections={'recover': {'u_from': str(tmp_path / 'nowhere')}})
    assert main(['recover', '--config', path, '--out', out_dir]) == 2
    assert _error(capsys)['error'] == 'config_error'
