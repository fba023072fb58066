"""
Run Configuration Module
Loads, merges and validates the JSON run configuration, applies
command-line overrides and builds the domain objects each command needs.
"""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from circuit import FEEDFORWARD_MODES, FeedforwardPolicy, LossModel, ResidualOffsetParams
from exceptions import ConfigError, FileFormatError
from fock import FockConfig
from lut import LutTable, build_lut
from states import ANCILLA_KINDS, AncillaSpec
from tomography import BinningScheme, ProbeSet

logger = logging.getLogger(__name__)

# Keys that never change results and stay out of the config hash
UNHASHED_KEYS = ('out_dir', 'threads')

DEFAULTS: Dict[str, Any] = {
    'gamma': 0.52,
    'seed': None,
    'out_dir': 'runs/latest',
    'threads': 1,
    'replay': False,
    'fock': {'n_sim': 30, 'n_tomo': 10, 'n_povm': 30},
    'ancilla': {
        'kind': 'fock_superposition',
        'coefficients': [[0.8, 0.0], [0.0, -0.6]],
        'path': None,
        'efficiency': 0.6,
        'cubic_squeezing': 0.3,
    },
    'loss': {'eta1': 0.97, 'eta2': 0.91},
    'feedforward': {
        'mode': 'exact',
        'lut': {'input_bits': 10, 'output_bits': 10, 'full_scale': 6.0},
    },
    'offset': {'amplitude_coeff': 0.161, 'phase_bias': 0.812, 'enabled': False, 'simulate': False},
    'probes': {
        'amplitudes': None,
        'n_amplitudes': 27,
        'max_amplitude': 3.5,
        'shots_per_amplitude': 80000,
        'phase_sectors': 1,
    },
    'binning': {'n_bins': 20, 'm_min': -1.0, 'm_max': 1.0, 'q_window': 0.6},
    'tomography': {
        'max_iter': 2000,
        'tolerance': 1e-9,
        'bootstrap_resamples': 100,
        'bootstrap_mode': 'cheap',
        'refit_iterations': 50,
        'require_convergence': False,
    },
    'quadrature': {'n_nodes': 64, 'q_range': 0.6},
    'sampling': {'grid_points': 2048, 'chunk_size': 1024},
    'wigner': {'extent': 5.0, 'points': 101},
}


def default_config() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULTS)


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str, problems: List[Tuple[str, str]]):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            problems.append((path, "unknown key"))
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                problems.append((path, "expected an object"))
                continue
            _merge(base[key], value, f"{path}.", problems)
        else:
            base[key] = value


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Read a JSON config and merge it over the defaults

    Raises:
        FileFormatError: missing file or invalid JSON
        ConfigError: unknown keys or wrong nesting
    """
    data = default_config()
    if path is None:
        return data
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            loaded = json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"error parsing config {path}: {e}") from e
    if not isinstance(loaded, dict):
        raise ConfigError([('', "top level must be an object")])
    problems: List[Tuple[str, str]] = []
    _merge(data, loaded, '', problems)
    if problems:
        raise ConfigError(problems)
    logger.info(f"Loaded config from {path}")
    return data


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """
    Apply 'dotted.key=value' overrides; values are parsed as JSON, else kept as strings

    Raises:
        ConfigError: malformed assignment or unknown key
    """
    problems: List[Tuple[str, str]] = []
    for item in assignments:
        if '=' not in item:
            problems.append((item, "override must look like key=value"))
            continue
        key, text = item.split('=', 1)
        parts = key.strip().split('.')
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node = None
                break
            node = node[part]
        if node is None or parts[-1] not in node or isinstance(node[parts[-1]], dict):
            problems.append((key, "unknown key"))
            continue
        node[parts[-1]] = _parse_value(text)
    if problems:
        raise ConfigError(problems)
    return data


def _check(problems, path: str, ok: bool, message: str):
    if not ok:
        problems.append((path, message))


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_coefficients(raw) -> List[complex]:
    """[[re, im], ...] or plain numbers to complex"""
    out = []
    for c in raw:
        if isinstance(c, (list, tuple)):
            out.append(complex(float(c[0]), float(c[1])))
        else:
            out.append(complex(float(c)))
    return out


def validate(data: Dict[str, Any]) -> 'RunConfig':
    """
    Check every field and report all problems at once

    Raises:
        ConfigError: with one (field path, message) pair per problem
    """
    p: List[Tuple[str, str]] = []
    _check(p, 'gamma', _is_number(data['gamma']), "must be a finite number")
    _check(p, 'seed', _is_int(data['seed']) and data['seed'] >= 0, "a nonnegative integer seed is required")
    _check(p, 'out_dir', isinstance(data['out_dir'], str) and data['out_dir'], "must be a path")
    _check(p, 'threads', _is_int(data['threads']) and data['threads'] >= 1, "must be a positive integer")
    _check(p, 'replay', isinstance(data['replay'], bool), "must be true or false")

    for key in ('n_sim', 'n_tomo', 'n_povm'):
        v = data['fock'][key]
        _check(p, f'fock.{key}', _is_int(v) and v >= 1, "must be a positive integer")

    anc = data['ancilla']
    _check(p, 'ancilla.kind', anc['kind'] in ANCILLA_KINDS, f"must be one of {list(ANCILLA_KINDS)}")
    if anc['kind'] == 'fock_superposition':
        try:
            coeffs = parse_coefficients(anc['coefficients'] or [])
            norm = sum(abs(c) ** 2 for c in coeffs)
            _check(p, 'ancilla.coefficients', coeffs and abs(norm - 1.0) < 1e-9, "must be a normalized list")
        except (TypeError, ValueError, IndexError):
            p.append(('ancilla.coefficients', "entries must be numbers or [re, im] pairs"))
    if anc['kind'] == 'density_file':
        _check(p, 'ancilla.path', isinstance(anc['path'], str) and anc['path'], "required for density_file")
    _check(p, 'ancilla.efficiency', _is_number(anc['efficiency']) and 0 <= anc['efficiency'] <= 1,
           "must be in [0, 1]")
    _check(p, 'ancilla.cubic_squeezing', _is_number(anc['cubic_squeezing']) and anc['cubic_squeezing'] >= 0,
           "must be nonnegative")

    for key in ('eta1', 'eta2'):
        v = data['loss'][key]
        _check(p, f'loss.{key}', _is_number(v) and 0 < v <= 1, "must be in (0, 1]")

    ff = data['feedforward']
    _check(p, 'feedforward.mode', ff['mode'] in FEEDFORWARD_MODES, f"must be one of {list(FEEDFORWARD_MODES)}")
    for key in ('input_bits', 'output_bits'):
        v = ff['lut'][key]
        _check(p, f'feedforward.lut.{key}', _is_int(v) and 2 <= v <= 24, "must be an integer in [2, 24]")
    _check(p, 'feedforward.lut.full_scale', _is_number(ff['lut']['full_scale']) and ff['lut']['full_scale'] > 0,
           "must be positive")

    off = data['offset']
    for key in ('amplitude_coeff', 'phase_bias'):
        _check(p, f'offset.{key}', _is_number(off[key]), "must be a number")
    for key in ('enabled', 'simulate'):
        _check(p, f'offset.{key}', isinstance(off[key], bool), "must be true or false")

    pr = data['probes']
    if pr['amplitudes'] is not None:
        amps = pr['amplitudes']
        ok = isinstance(amps, list) and amps and all(_is_number(a) and a >= 0 for a in amps)
        _check(p, 'probes.amplitudes', ok and list(amps) == sorted(amps), "must be a sorted list of nonnegative numbers")
    _check(p, 'probes.n_amplitudes', _is_int(pr['n_amplitudes']) and pr['n_amplitudes'] >= 1, "must be positive")
    _check(p, 'probes.max_amplitude', _is_number(pr['max_amplitude']) and pr['max_amplitude'] >= 0,
           "must be nonnegative")
    for key in ('shots_per_amplitude', 'phase_sectors'):
        _check(p, f'probes.{key}', _is_int(pr[key]) and pr[key] >= 1, "must be a positive integer")

    b = data['binning']
    _check(p, 'binning.n_bins', _is_int(b['n_bins']) and b['n_bins'] >= 1, "must be a positive integer")
    _check(p, 'binning.m_max', _is_number(b['m_min']) and _is_number(b['m_max']) and b['m_max'] > b['m_min'],
           "must exceed m_min")
    _check(p, 'binning.q_window', _is_number(b['q_window']) and b['q_window'] > 0, "must be positive")

    t = data['tomography']
    _check(p, 'tomography.max_iter', _is_int(t['max_iter']) and t['max_iter'] >= 1, "must be a positive integer")
    _check(p, 'tomography.tolerance', _is_number(t['tolerance']) and t['tolerance'] >= 0, "must be nonnegative")
    _check(p, 'tomography.bootstrap_resamples',
           _is_int(t['bootstrap_resamples']) and (t['bootstrap_resamples'] == 0 or t['bootstrap_resamples'] >= 50),
           "must be 0 or at least 50")
    _check(p, 'tomography.bootstrap_mode', t['bootstrap_mode'] in ('cheap', 'full'), "must be 'cheap' or 'full'")
    _check(p, 'tomography.refit_iterations', _is_int(t['refit_iterations']) and t['refit_iterations'] >= 1,
           "must be a positive integer")
    _check(p, 'tomography.require_convergence', isinstance(t['require_convergence'], bool), "must be true or false")

    q = data['quadrature']
    _check(p, 'quadrature.n_nodes', _is_int(q['n_nodes']) and q['n_nodes'] >= 64, "must be an integer >= 64")
    _check(p, 'quadrature.q_range', _is_number(q['q_range']) and q['q_range'] > 0, "must be positive")

    s = data['sampling']
    _check(p, 'sampling.grid_points', _is_int(s['grid_points']) and s['grid_points'] >= 256, "must be >= 256")
    _check(p, 'sampling.chunk_size', _is_int(s['chunk_size']) and s['chunk_size'] >= 1, "must be positive")

    w = data['wigner']
    _check(p, 'wigner.extent', _is_number(w['extent']) and w['extent'] > 0, "must be positive")
    _check(p, 'wigner.points', _is_int(w['points']) and w['points'] >= 2, "must be an integer >= 2")

    if p:
        raise ConfigError(p)
    return RunConfig(data)


class RunConfig:
    """Validated configuration tree with builders for the domain objects"""

    def __init__(self, data: Dict[str, Any]):
        self.data = data

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    @property
    def gamma(self) -> float:
        return float(self.data['gamma'])

    @property
    def seed(self) -> int:
        return int(self.data['seed'])

    @property
    def threads(self) -> int:
        return 1 if self.data['replay'] else int(self.data['threads'])

    @property
    def replay(self) -> bool:
        return bool(self.data['replay'])

    def fock(self, stage: str) -> FockConfig:
        return FockConfig(int(self.data['fock'][stage]))

    def ancilla_spec(self) -> AncillaSpec:
        a = self.data['ancilla']
        return AncillaSpec(
            kind=a['kind'],
            coefficients=parse_coefficients(a['coefficients'] or []) if a['kind'] == 'fock_superposition' else [],
            path=a['path'],
            efficiency=float(a['efficiency']),
            cubic_gamma=self.gamma,
            cubic_squeezing=float(a['cubic_squeezing']),
        )

    def loss_model(self) -> LossModel:
        return LossModel(float(self.data['loss']['eta1']), float(self.data['loss']['eta2']))

    def lut_table(self, reference_q: Optional[np.ndarray] = None) -> LutTable:
        lut = self.data['feedforward']['lut']
        return build_lut(self.gamma, lut['input_bits'], lut['output_bits'], float(lut['full_scale']),
                         reference_q=reference_q)

    def policy(self) -> FeedforwardPolicy:
        mode = self.data['feedforward']['mode']
        table = self.lut_table() if mode == 'lut' else None
        return FeedforwardPolicy(self.gamma, mode, table)

    def offset(self) -> ResidualOffsetParams:
        o = self.data['offset']
        return ResidualOffsetParams(float(o['amplitude_coeff']), float(o['phase_bias']),
                                    bool(o['enabled']), bool(o['simulate']))

    def probe_set(self) -> ProbeSet:
        pr = self.data['probes']
        if pr['amplitudes'] is not None:
            return ProbeSet(tuple(float(a) for a in pr['amplitudes']), pr['shots_per_amplitude'], pr['phase_sectors'])
        return ProbeSet.evenly_spaced(pr['n_amplitudes'], float(pr['max_amplitude']), pr['shots_per_amplitude'],
                                      pr['phase_sectors'])

    def binning(self) -> BinningScheme:
        b = self.data['binning']
        return BinningScheme(b['n_bins'], float(b['m_min']), float(b['m_max']), float(b['q_window']))

    def hash(self) -> str:
        return config_hash(self.data)


def canonical_json(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=True)


def config_hash(data: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON without keys that cannot change results"""
    hashed = {k: v for k, v in data.items() if k not in UNHASHED_KEYS}
    return hashlib.sha256(canonical_json(hashed).encode('utf-8')).hexdigest()


def resolve_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                   out_dir: Optional[str] = None, threads: Optional[int] = None, replay: bool = False,
                   assignments: Sequence[str] = ()) -> RunConfig:
    """Load, apply flag and --set overrides, then validate"""
    data = load_config(path)
    apply_overrides(data, assignments)
    if seed is not None:
        data['seed'] = seed
    if out_dir is not None:
        data['out_dir'] = out_dir
    if threads is not None:
        data['threads'] = threads
    if replay:
        data['replay'] = True
    return validate(data)
