import json
import os

import numpy as np
import pandas as pd
import pytest

from experiment import (
    CSV_COLUMNS,
    EXACT,
    ConfigError,
    ExperimentConfig,
    build_instance,
    build_operator,
    cell_seed,
    execute,
    load_config,
    make_tasks,
    probe,
    resolve_vector,
    run,
    run_cell,
    summary_json,
    trim_series,
    write_rows,
)
from rates import FAIL, PASS
from tikhonov_rates import EXIT_FAILED, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, main

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')


def tiny_config(**overrides):
    raw = {
        'name': 'tiny',
        'mode': 'noisy',
        'master_seed': 7,
        'operator': {'kind': 'diagonal', 'dim': 20, 'sigma': {'kind': 'power_decay', 'exponent': 1.0}},
        'p': 2.0,
        'regularizer': {'kind': 'power_norm', 'q': 2.0},
        'source': {'mode': 'smooth', 'v': {'kind': 'power_decay', 'exponent': 2.0}},
        'delta': {'min': 1e-4, 'max': 1e-2, 'count': 4},
        'seeds': 2,
        'alpha': {'rule': 'choice', 'c0': 1.0},
        'solver': {'kkt_tol': 1e-8},
    }
    raw.update(overrides)
    return raw


def tiny_exact_config():
    raw = tiny_config(mode='exact', alpha={'rule': 'grid', 'min': 1e-4, 'max': 1e-1, 'count': 8})
    del raw['delta']
    return raw


def write_config(tmp_path, raw, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def test_config_defaults():
    cfg = ExperimentConfig.from_dict(tiny_config())
    assert cfg.r_x == 2.0 and cfg.r_y == 2.0
    assert cfg.rate.q == 2.0
    assert cfg.rate.predicted is None
    assert cfg.probe is None
    assert cfg.solver.kkt_tol == 1e-8


@pytest.mark.parametrize("overrides", [
    {'mode': 'streaming'},
    {'operator': None},
    {'delta': None},
    {'delta': {'min': 1e-4, 'max': 1e-2, 'count': 2}},
    {'delta': {'min': 1e-2, 'max': 1e-4, 'count': 5}},
    {'alpha': {'rule': 'grid', 'min': 1e-4, 'max': 1e-1, 'count': 5}},
    {'p': 1.0},
    {'seeds': 0},
    {'rate': {'check': 'sideways'}},
    {'rate': {'trim': 0.5}},
    {'solver': {'kkt_tol': 0.0}},
    {'solver': {'tolerance': 1e-8}},
])
def test_config_rejects_invalid(overrides):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tiny_config(**overrides))


def test_exact_mode_needs_alpha_grid():
    raw = tiny_exact_config()
    raw['alpha'] = {'rule': 'choice', 'c0': 1.0}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_power_rule_needs_exponent():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tiny_config(alpha={'rule': 'power', 'c0': 1.0}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tiny_config(alpha={'rule': 'power', 'c0': 1.0, 'exponent': 'one'}))
    cfg = ExperimentConfig.from_dict(tiny_config(alpha={'rule': 'power', 'c0': 0.5, 'exponent': 1.0}))
    tasks = make_tasks(cfg, build_instance(cfg))
    assert tasks[0].alpha == pytest.approx(0.5 * tasks[0].delta)


def test_missing_matrix_file_is_a_config_error(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(operator={'kind': 'dense', 'matrix_file': 'absent.txt'}),
                                     base_dir=str(tmp_path))
    with pytest.raises(ConfigError):
        build_operator(cfg, np.random.default_rng(0))


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"name": ')
    with pytest.raises(ConfigError):
        load_config(str(broken))


def test_resolve_vector_kinds(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config(), base_dir=str(tmp_path))
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(resolve_vector([1.0, 2.0], 2, cfg, rng, 'v'), [1.0, 2.0])
    np.testing.assert_allclose(resolve_vector({'kind': 'power_decay', 'exponent': 1.0}, 4, cfg, rng, 'v'),
                               [1.0, 0.5, 1 / 3, 0.25])
    np.testing.assert_allclose(resolve_vector({'kind': 'constant', 'value': 3.0, 'length': 2}, None, cfg, rng, 'v'),
                               [3.0, 3.0])
    assert resolve_vector({'kind': 'random'}, 5, cfg, rng, 'v').shape == (5,)
    (tmp_path / 'v.txt').write_text("1.0\n2.0\n3.0\n")
    np.testing.assert_allclose(resolve_vector({'kind': 'file', 'path': 'v.txt'}, 3, cfg, rng, 'v'), [1, 2, 3])
    with pytest.raises(ConfigError):
        resolve_vector([1.0, 2.0], 3, cfg, rng, 'v')
    with pytest.raises(ConfigError):
        resolve_vector({'kind': 'fractal'}, 3, cfg, rng, 'v')
    with pytest.raises(ConfigError):
        resolve_vector('ones', 3, cfg, rng, 'v')


def test_build_convolution_operator():
    raw = tiny_config(operator={'kind': 'convolution', 'dim': 16,
                                'kernel': [0.5, 0.25, 0.25]})
    cfg = ExperimentConfig.from_dict(raw)
    A = build_operator(cfg, np.random.default_rng(0))
    assert A.domain.dim == 16
    assert A.to_dense().shape == (16, 16)


def test_build_instance_is_reproducible():
    cfg = ExperimentConfig.from_dict(tiny_config(source={'mode': 'generic', 'scale': 2.0}))
    a, b = build_instance(cfg), build_instance(cfg)
    np.testing.assert_array_equal(a.instance.omega_true, b.instance.omega_true)
    assert a.v is None


def test_build_instance_rejects_unknown_source():
    cfg = ExperimentConfig.from_dict(tiny_config(source={'mode': 'rough'}))
    with pytest.raises(ConfigError):
        build_instance(cfg)


def test_trim_series():
    medians = pd.Series(np.arange(1.0, 11.0), index=np.arange(10.0))
    assert len(trim_series(medians, 0.1)) == 8
    assert len(trim_series(medians, 0.0)) == 10
    assert len(trim_series(medians.iloc[:4], 0.25)) == 4


def test_run_noisy(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config())
    report = run(cfg)
    assert report.n_rows == 8
    assert report.n_failed == 0
    assert report.verdict in (PASS, FAIL)
    assert np.isfinite(report.fitted_slope)
    assert (report.rows['bregman_error'] >= 0).all()

    out = tmp_path / 'rows.csv'
    write_rows(report, str(out))
    df = pd.read_csv(out)
    assert list(df.columns) == CSV_COLUMNS
    assert len(df) == 8
    summary = json.loads(summary_json(cfg, report))
    assert summary['name'] == 'tiny'
    assert summary['predicted'] == pytest.approx(4 / 3)


def test_run_exact():
    cfg = ExperimentConfig.from_dict(tiny_exact_config())
    report = run(cfg)
    assert report.mode == EXACT
    assert report.n_rows == 8
    assert (report.rows['delta'] == 0.0).all()
    assert report.predicted_exponent == pytest.approx(2.0)


def test_cell_seed_is_a_stable_integer():
    seed = cell_seed(7, 1, 0)
    assert isinstance(seed, int)
    assert seed == cell_seed(7, 1, 0)
    assert seed != cell_seed(7, 0, 1)
    assert seed != cell_seed(8, 1, 0)


def test_run_cell_adds_seeded_noise():
    cfg = ExperimentConfig.from_dict(tiny_config())
    tasks = make_tasks(cfg, build_instance(cfg))
    first, again = run_cell(tasks[-1]), run_cell(tasks[-1])
    assert first['converged']
    assert np.isfinite(first['bregman_error']) and first['bregman_error'] > 0
    assert first == again
    assert run_cell(tasks[-2])['bregman_error'] != first['bregman_error']


def test_parallel_matches_serial():
    cfg = ExperimentConfig.from_dict(tiny_config())
    tasks = make_tasks(cfg, build_instance(cfg))
    serial = pd.DataFrame(execute(tasks, jobs=1))
    parallel = pd.DataFrame(execute(tasks, jobs=2))
    pd.testing.assert_frame_equal(serial, parallel)


def test_csv_is_identical_across_job_counts(tmp_path):
    cfg = ExperimentConfig.from_dict(tiny_config())
    serial, parallel = tmp_path / 'serial.csv', tmp_path / 'parallel.csv'
    write_rows(run(cfg, jobs=1), str(serial))
    write_rows(run(cfg, jobs=2), str(parallel))
    assert serial.read_bytes() == parallel.read_bytes()


def test_single_thread_override(monkeypatch):
    monkeypatch.setenv('TIKRATES_SINGLE_THREAD', '1')
    cfg = ExperimentConfig.from_dict(tiny_config(seeds=1))
    rows = execute(make_tasks(cfg, build_instance(cfg)), jobs=4)
    assert len(rows) == 4


def test_probe_smooth_config():
    result = probe(load_config(os.path.join(CONFIG_DIR, 'probe_smooth.json')))
    assert result['holds']
    assert result['max_ratio'] <= 1.0 + 1e-8
    assert result['range_residual'] <= 1e-8
    assert not result['degenerate']
    assert result['fitted_mu'] == pytest.approx(0.5, abs=0.05)


def test_probe_generic_config():
    result = probe(load_config(os.path.join(CONFIG_DIR, 'probe_generic.json')))
    assert result['range_residual'] > 0.1
    assert result['range_rank'] == 1


def test_probe_zero_config():
    result = probe(load_config(os.path.join(CONFIG_DIR, 'probe_zero.json')))
    assert result['degenerate']
    assert result['range_degenerate']
    assert result['fitted_mu'] is None
    assert "x_true = 0" in result['regime']


def test_cli_selftest():
    assert main(['selftest']) == EXIT_OK
    assert main(['selftest', '--tolerance', '0']) == EXIT_FAILED


def test_cli_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(['frobnicate']) == EXIT_USAGE
    bad = write_config(tmp_path, tiny_config(mode='streaming'))
    assert main(['run', '--config', bad, '--out', str(tmp_path / 'rows.csv')]) == EXIT_USAGE
    good = write_config(tmp_path, tiny_config(), name='good.json')
    assert main(['run', '--config', good, '--out', str(tmp_path / 'rows.csv'), '--jobs', '0']) == EXIT_USAGE
    assert main(['probe', '--config', str(tmp_path / 'missing.json')]) == EXIT_USAGE


def test_cli_usage_errors_in_config_contents(tmp_path):
    out = str(tmp_path / 'rows.csv')
    no_exponent = write_config(tmp_path, tiny_config(alpha={'rule': 'power', 'c0': 1.0}), name='power.json')
    assert main(['run', '--config', no_exponent, '--out', out]) == EXIT_USAGE
    no_matrix = write_config(tmp_path, tiny_config(operator={'kind': 'dense', 'matrix_file': 'absent.txt'}),
                             name='dense.json')
    assert main(['run', '--config', no_matrix, '--out', out]) == EXIT_USAGE
    assert main(['probe', '--config', no_matrix]) == EXIT_USAGE


def test_cli_run_reports_unconverged_solves(tmp_path):
    config = write_config(tmp_path, tiny_config(solver={'kkt_tol': 1e-12, 'max_iters': 1}))
    assert main(['run', '--config', config, '--out', str(tmp_path / 'rows.csv')]) == EXIT_NOT_CONVERGED
    assert not pd.read_csv(tmp_path / 'rows.csv')['converged'].any()


def test_cli_run_writes_outputs(tmp_path):
    config = write_config(tmp_path, tiny_config(rate={'tolerance': 10.0}))
    out = tmp_path / 'rows.csv'
    summary = tmp_path / 'summary.json'
    assert main(['run', '--config', config, '--out', str(out), '--summary', str(summary)]) == EXIT_OK
    assert list(pd.read_csv(out).columns) == CSV_COLUMNS
    assert json.loads(summary.read_text())['verdict'] == PASS


def test_cli_run_reports_failed_verdict(tmp_path):
    config = write_config(tmp_path, tiny_config(rate={'predicted': 5.0, 'tolerance': 0.01}))
    assert main(['run', '--config', config, '--out', str(tmp_path / 'rows.csv')]) == EXIT_FAILED
    exploratory = write_config(tmp_path, tiny_config(rate={'predicted': 5.0, 'tolerance': 0.01,
                                                           'exploratory': True}), name='explore.json')
    assert main(['run', '--config', exploratory, '--out', str(tmp_path / 'rows.csv')]) == EXIT_OK


def test_cli_probe_writes_report(tmp_path):
    out = tmp_path / 'probe.json'
    assert main(['probe', '--config', os.path.join(CONFIG_DIR, 'probe_zero.json'), '--out', str(out)]) == EXIT_OK
    assert json.loads(out.read_text())['degenerate'] is True
