import json
from pathlib import Path

import numpy as np
import pytest

from exceptions import ConfigError, FileFormatError
from fock import save_operator
from main import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_OK, build_parser, run
from run_config import apply_overrides, config_hash, default_config, load_config, resolve_config, validate
from run_store import RunStore, file_sha256, load_manifest
from states import AncillaSpec, ancilla_state
from version import __version__
from fock import FockConfig

CONFIGS = Path(__file__).resolve().parents[1] / 'configs'

SMALL_RUN = [
    '--set', 'probes.n_amplitudes=3',
    '--set', 'probes.max_amplitude=1.0',
    '--set', 'probes.shots_per_amplitude=300',
    '--set', 'ancilla.kind=vacuum',
    '--set', 'fock.n_sim=10',
    '--set', 'fock.n_tomo=4',
    '--set', 'tomography.bootstrap_resamples=0',
    '--set', 'tomography.max_iter=50',
]


def problem_paths(err):
    return {path for path, _ in err.value.problems}


def test_default_config_needs_seed():
    with pytest.raises(ConfigError) as err:
        validate(default_config())
    assert problem_paths(err) == {'seed'}


def test_all_problems_reported_together():
    data = default_config()
    data['gamma'] = 'x'
    data['loss']['eta1'] = 2.0
    data['tomography']['bootstrap_resamples'] = 10
    with pytest.raises(ConfigError) as err:
        validate(data)
    assert problem_paths(err) == {'gamma', 'seed', 'loss.eta1', 'tomography.bootstrap_resamples'}
    assert 'loss.eta1' in str(err.value)


def test_overrides_are_parsed():
    data = apply_overrides(default_config(), ['loss.eta1=0.5', 'ancilla.kind=vacuum', 'probes.amplitudes=[0, 1.5]',
                                              'offset.enabled=true'])
    assert data['loss']['eta1'] == 0.5
    assert data['ancilla']['kind'] == 'vacuum'
    assert data['probes']['amplitudes'] == [0, 1.5]
    assert data['offset']['enabled'] is True


@pytest.mark.parametrize('assignment', ['loss.eta3=1', 'fock=3', 'gamma', 'nothing.here=1'])
def test_bad_overrides(assignment):
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), [assignment])


def test_config_files(tmp_path):
    for name in ('superposition.json', 'vacuum.json', 'quick.json'):
        cfg = resolve_config(CONFIGS / name, seed=3)
        assert cfg.gamma == pytest.approx(0.52)
    assert resolve_config(CONFIGS / 'quick.json').seed == 7
    unknown = tmp_path / 'unknown.json'
    unknown.write_text(json.dumps({'gama': 0.5}))
    with pytest.raises(ConfigError):
        load_config(unknown)
    broken = tmp_path / 'broken.json'
    broken.write_text('{"gamma": ')
    with pytest.raises(FileFormatError):
        load_config(broken)
    with pytest.raises(FileFormatError):
        load_config(tmp_path / 'missing.json')


def test_hash_ignores_output_location():
    a = resolve_config(seed=1, out_dir='a', threads=1)
    b = resolve_config(seed=1, out_dir='b', threads=8)
    c = resolve_config(seed=2, out_dir='a')
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()
    assert config_hash(a.data) == a.hash()


def test_replay_forces_single_thread():
    cfg = resolve_config(seed=1, threads=8, replay=True)
    assert cfg.threads == 1
    assert cfg.replay


def test_domain_objects_from_config():
    cfg = resolve_config(CONFIGS / 'superposition.json', seed=1)
    assert cfg.policy().mode == 'lut'
    assert cfg.policy().table.entries.size == 1024
    assert cfg.ancilla_spec().coefficients == [0.8, -0.6j]
    assert cfg.loss_model().eta2 == 0.91
    assert cfg.probe_set().total_shots == 27 * 80000
    assert cfg.binning().n_bins == 20


def test_store_writes_checksummed_manifest(tmp_path):
    cfg = resolve_config(seed=4, out_dir=str(tmp_path))
    store = RunStore(tmp_path)
    path = store.write_json('numbers.json', {'b': 2, 'a': 1})
    store.write_rows('table.csv', ['x', 'y'], [(0.1, 1), (0.2, 2)])
    with store.timed('stage'):
        pass
    store.write_manifest('bound', cfg)
    manifest = load_manifest(tmp_path)
    names = [a['name'] for a in manifest['artifacts']]
    assert names == ['numbers.json', 'table.csv']
    assert manifest['artifacts'][0]['sha256'] == file_sha256(path)
    assert 'timings' in manifest
    assert 'out_dir' not in manifest['config']
    assert manifest['versions']['package'] == __version__
    assert (tmp_path / 'table.csv').read_text().splitlines()[1] == '0.1,1'


def test_replay_manifest_has_no_timings(tmp_path):
    cfg = resolve_config(seed=4, replay=True)
    store = RunStore(tmp_path, replay=True)
    store.write_json('x.json', [1])
    store.write_manifest('bound', cfg)
    assert 'timings' not in load_manifest(tmp_path)


def test_corrupt_manifest_is_moved_aside(tmp_path):
    (tmp_path / 'manifest.json').write_text('{broken')
    RunStore(tmp_path)
    assert (tmp_path / 'manifest.json.bak').read_text() == '{broken'
    assert not (tmp_path / 'manifest.json').exists()
    assert load_manifest(tmp_path / 'nowhere') is None


def test_parser_requires_command_inputs():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(['tomo', '--seed', '1'])
    args = parser.parse_args(['simulate', '--seed', '1', '--set', 'gamma=0.3', '--set', 'loss.eta1=1'])
    assert args.assignments == ['gamma=0.3', 'loss.eta1=1']


def test_bound_command(tmp_path, capsys):
    assert run(['bound', '--seed', '1', '--set', 'gamma=0', '--out', str(tmp_path)]) == EXIT_OK
    data = json.loads((tmp_path / 'bound.json').read_text())
    assert data['value'] == 0.0
    assert data['attained'] is False
    assert 'infimum' in capsys.readouterr().out
    assert (tmp_path / 'run.log').exists()


def test_lut_check_command(tmp_path):
    assert run(['lut-check', '--seed', '1', '--out', str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / 'lut_summary.json').read_text())
    assert summary['max_angle_error'] <= summary['error_bound']
    assert summary['monotone']
    assert summary['total_latency_ns'] == pytest.approx(26.8)
    assert load_manifest(tmp_path)['command'] == 'lut-check'


def test_missing_seed_is_a_config_error(tmp_path):
    assert run(['bound', '--out', str(tmp_path)]) == EXIT_CONFIG
    assert run(['bound', '--seed', '1', '--set', 'loss.eta1=3', '--out', str(tmp_path)]) == EXIT_CONFIG
    assert run(['bound', '--seed', '1', '--config', str(tmp_path / 'none.json')]) == EXIT_CONFIG


def test_simulate_replay_is_reproducible(tmp_path):
    first, second = tmp_path / 'one', tmp_path / 'two'
    for out in (first, second):
        assert run(['simulate', '--seed', '9', '--replay', '--out', str(out)] + SMALL_RUN) == EXIT_OK
    assert file_sha256(first / 'records.csv') == file_sha256(second / 'records.csv')
    assert (first / 'manifest.json').read_bytes() == (second / 'manifest.json').read_bytes()
    summary = json.loads((first / 'simulate_summary.json').read_text())
    assert summary['records'] == 900


def test_threads_do_not_change_records(tmp_path):
    single, multi = tmp_path / 'single', tmp_path / 'multi'
    extra = ['--set', 'sampling.chunk_size=100']
    assert run(['simulate', '--seed', '9', '--out', str(single)] + SMALL_RUN + extra) == EXIT_OK
    assert run(['simulate', '--seed', '9', '--threads', '3', '--out', str(multi)] + SMALL_RUN + extra) == EXIT_OK
    assert file_sha256(single / 'records.csv') == file_sha256(multi / 'records.csv')


def test_tomo_on_simulated_records(tmp_path):
    sim = tmp_path / 'sim'
    assert run(['simulate', '--seed', '2', '--out', str(sim)] + SMALL_RUN) == EXIT_OK
    out = tmp_path / 'tomo'
    code = run(['tomo', '--seed', '2', '--records', str(sim / 'records.csv'), '--out', str(out)] + SMALL_RUN)
    assert code == EXIT_OK
    summary = json.loads((out / 'tomo_summary.json').read_text())
    assert summary['records'] == 900
    rows = (out / 'tomography_variance.csv').read_text().splitlines()
    assert rows[0] == 'm_bin,variance,error'
    assert len(rows) == 21
    assert (out / 'safety_range.csv').exists()


def test_tomo_convergence_failure(tmp_path):
    sim = tmp_path / 'sim'
    assert run(['simulate', '--seed', '2', '--out', str(sim)] + SMALL_RUN) == EXIT_OK
    code = run(['tomo', '--seed', '2', '--records', str(sim / 'records.csv'), '--out', str(tmp_path / 'tomo')]
               + SMALL_RUN + ['--set', 'tomography.max_iter=1', '--set', 'tomography.require_convergence=true'])
    assert code == EXIT_CONVERGENCE


def test_tomo_missing_records(tmp_path):
    code = run(['tomo', '--seed', '1', '--records', str(tmp_path / 'none.csv'), '--out', str(tmp_path)])
    assert code == EXIT_CONFIG


def test_wigner_command(tmp_path):
    source = tmp_path / 'vacuum.json'
    save_operator(ancilla_state(AncillaSpec('vacuum'), FockConfig(n_max=4)), source)
    out = tmp_path / 'w'
    assert run(['wigner', '--seed', '1', '--input', str(source), '--out', str(out),
                '--set', 'wigner.points=21']) == EXIT_OK
    lines = (out / 'wigner.csv').read_text().splitlines()
    assert len(lines) == 1 + 21 * 21
    summary = json.loads((out / 'wigner_summary.json').read_text())
    assert summary['max'] == pytest.approx(1 / np.pi, rel=1e-6)


def test_povm_command(tmp_path):
    code = run(['povm', '--seed', '1', '--out', str(tmp_path),
                '--set', 'ancilla.kind=vacuum', '--set', 'fock.n_povm=10', '--set', 'binning.n_bins=2'])
    assert code == EXIT_OK
    summary = json.loads((tmp_path / 'povm_summary.json').read_text())
    assert summary['averaged_variance_lossy'] > summary['averaged_variance_ideal']
    assert len((tmp_path / 'povm_ideal_variance.csv').read_text().splitlines()) == 3
