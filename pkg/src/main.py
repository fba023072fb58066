"""
Nonlinear Quadrature Sim - Main Entry Point
Simulator and detector-tomography pipelines for the feedforward
measurement of p + gamma x^2

Usage:
    python main.py simulate  --config C --seed S   - Monte-Carlo record file
    python main.py moments   --config C --seed S   - mean/variance scan against the heterodyne baseline
    python main.py povm      --config C --seed S   - theoretical detector states and variance tables
    python main.py tomo      --records R --seed S  - maximum-likelihood reconstruction from a record file
    python main.py wigner    --input OP --seed S   - rasterize a stored operator
    python main.py bound     --seed S              - Gaussian bound on var(p + gamma x^2)
    python main.py lut-check --seed S              - LUT accuracy table and latency budget

Common flags: --out DIR, --threads N, --replay, --set key.path=value, --verbose
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import psutil

from circuit import (
    STREAM_BOOTSTRAP,
    STREAM_PROBES,
    STREAM_SHOTS,
    RecordTable,
    fit_moments,
    moment_rows_to_dicts,
    moment_scan,
    simulate_batch,
    substream,
)
from exceptions import ConfigError, ConvergenceError, FileFormatError, NotConverged
from fock import load_operator, ripple_amplitude, save_operator, wigner_grid, write_wigner_csv
from lut import default_latency_budget, error_bound, exact_theta, export_table_csv, is_monotone, latency_report, \
    lut_eval_array, max_angle_error
from povm import averaged_detector_state, bin_elements, povm_m, variance_table
from run_config import RunConfig, resolve_config
from run_store import RunStore
from states import CoherentProbe, NonlinearQuadratureSpec, ancilla_state, gaussian_bound, nonlinear_variance
from tomography import (
    bin_outcomes,
    bootstrap_variance,
    generate_probe_set,
    mle_reconstruct,
    probe_operators,
    safety_range,
)

COMMANDS = ('simulate', 'moments', 'povm', 'tomo', 'wigner', 'bound', 'lut-check')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_INTERRUPTED = 130

logger = logging.getLogger(__name__)


def setup_logging(out_dir: Optional[Path] = None, verbose: bool = False):
    """Set up logging to run.log in the output directory and to the console"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(out_dir / 'run.log', encoding='utf-8'))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def log_resources():
    """Resident memory and CPU count, for the log only"""
    try:
        rss = psutil.Process().memory_info().rss / 2 ** 20
        logger.info(f"Resources: {rss:.0f} MiB resident, {psutil.cpu_count(logical=True)} logical CPUs")
    except psutil.Error as e:
        logger.debug(f"Could not read resource usage: {e}")


def handle_simulate(cfg: RunConfig, store: RunStore) -> bool:
    """Simulate every probe shot and write records.csv"""
    ancilla = ancilla_state(cfg.ancilla_spec(), cfg.fock('n_sim'))
    probe_set = cfg.probe_set()
    with store.timed('probes'):
        ax, ap = generate_probe_set(probe_set, substream(cfg.seed, STREAM_PROBES))
    sampling = cfg['sampling']
    with store.timed('simulate'):
        table = simulate_batch(ax, ap, ancilla, cfg.policy(), cfg.loss_model(), cfg.offset(), cfg.seed,
                               stream=(STREAM_SHOTS,), chunk_size=sampling['chunk_size'], threads=cfg.threads,
                               grid_points=sampling['grid_points'])
    table.to_csv(store.path('records.csv'))
    store.add_file('records.csv')

    scheme = cfg.binning()
    window = np.abs(table.q) < scheme.q_window
    in_range = window & (table.m >= scheme.m_min) & (table.m < scheme.m_max)
    store.write_json('simulate_summary.json', {
        'records': len(table),
        'in_window': int(np.count_nonzero(window)),
        'in_bins': int(np.count_nonzero(in_range)),
        'mean_m': float(np.mean(table.m)) if len(table) else None,
        'var_m': float(np.var(table.m)) if len(table) else None,
    })
    logger.info(f"Simulated {len(table)} records, {int(np.count_nonzero(in_range))} inside the binned window")
    return True


def handle_moments(cfg: RunConfig, store: RunStore) -> bool:
    """Moment scan along alpha_x and alpha_p, feedforward against heterodyne"""
    ancilla = ancilla_state(cfg.ancilla_spec(), cfg.fock('n_sim'))
    reach = np.sqrt(2) * float(cfg['probes']['max_amplitude'])
    n = int(cfg['probes']['n_amplitudes'])
    probes = [CoherentProbe(float(v), 0.0) for v in np.linspace(-reach, reach, n)]
    probes += [CoherentProbe(0.0, float(v)) for v in np.linspace(-reach, reach, n) if v != 0.0]
    shots = int(cfg['probes']['shots_per_amplitude'])
    chunk = cfg['sampling']['chunk_size']
    with store.timed('feedforward'):
        rows = moment_scan(probes, shots, ancilla, cfg.policy(), cfg.loss_model(), cfg.offset(), cfg.seed,
                           chunk_size=chunk, threads=cfg.threads)
    with store.timed('heterodyne'):
        baseline = moment_scan(probes, shots, ancilla, cfg.policy(), cfg.loss_model(), cfg.offset(), cfg.seed,
                               heterodyne=True, chunk_size=chunk, threads=cfg.threads)
    store.write_dict_rows('moments_feedforward.csv', moment_rows_to_dicts(rows))
    store.write_dict_rows('moments_heterodyne.csv', moment_rows_to_dicts(baseline))
    fits = {'feedforward': asdict(fit_moments(rows)), 'heterodyne': asdict(fit_moments(baseline))}
    store.write_json('moments_fit.json', fits)
    logger.info(f"Variance slope in alpha_x^2: feedforward {fits['feedforward']['variance_slope']:.4f}, "
                f"heterodyne {fits['heterodyne']['variance_slope']:.4f}")
    return True


def handle_povm(cfg: RunConfig, store: RunStore) -> bool:
    """Ideal and detector-loss elements with their variance tables"""
    fock_cfg = cfg.fock('n_povm')
    ancilla = ancilla_state(cfg.ancilla_spec(), fock_cfg)
    scheme = cfg.binning()
    quad = cfg['quadrature']
    spec = NonlinearQuadratureSpec(cfg.gamma, 1)

    with store.timed('ideal'):
        ideal = [povm_m(float(m), ancilla, cfg.gamma, quad['q_range'], quad['n_nodes'], fock_cfg)
                 for m in scheme.centers]
    with store.timed('lossy'):
        lossy = bin_elements(ancilla, cfg.gamma, scheme.edges, quad['q_range'], cfg.loss_model(),
                             work_cfg=fock_cfg, q_nodes=quad['n_nodes'])
    averaged_ideal = averaged_detector_state(ideal, cfg.gamma)
    averaged_lossy = averaged_detector_state(lossy[:-1], cfg.gamma)

    store.write_dict_rows('povm_ideal_variance.csv', variance_table(ideal, cfg.gamma))
    store.write_dict_rows('povm_lossy_variance.csv', variance_table(lossy[:-1], cfg.gamma))
    save_operator(averaged_ideal.operator, store.path('detector_state_ideal.json'))
    store.add_file('detector_state_ideal.json')
    save_operator(averaged_lossy.operator, store.path('detector_state_lossy.json'))
    store.add_file('detector_state_lossy.json')
    store.write_json('povm_summary.json', {
        'ancilla_variance_minus': nonlinear_variance(ancilla, NonlinearQuadratureSpec(cfg.gamma, -1)),
        'ancilla_variance_plus': nonlinear_variance(ancilla, spec),
        'averaged_variance_ideal': averaged_ideal.variance,
        'averaged_variance_lossy': averaged_lossy.variance,
    })
    logger.info(f"Averaged detector-state variance: ideal {averaged_ideal.variance:.4f}, "
                f"lossy {averaged_lossy.variance:.4f}")
    return True


def handle_tomo(cfg: RunConfig, store: RunStore, records: Path) -> bool:
    """Bin a record file, reconstruct the POVM and bootstrap the variances"""
    table = RecordTable.from_csv(records)
    scheme = cfg.binning()
    probe_set = cfg.probe_set()
    grid = probe_set.amplitudes
    tomo = cfg['tomography']
    n_tomo = cfg['fock']['n_tomo']

    with store.timed('binning'):
        freqs = bin_outcomes(table, scheme, grid, probe_set.phase_sectors)
        probes = probe_operators(table, n_tomo, grid, probe_set.phase_sectors)
    with store.timed('mle'):
        result = mle_reconstruct(freqs.outcome_counts(), probes, tomo['max_iter'], tomo['tolerance'],
                                 gamma=cfg.gamma)
    if tomo['bootstrap_resamples']:
        with store.timed('bootstrap'):
            bootstrap_variance(freqs, probes, result, substream(cfg.seed, STREAM_BOOTSTRAP),
                               tomo['bootstrap_resamples'], tomo['bootstrap_mode'], tomo['refit_iterations'],
                               tomo['max_iter'], tomo['tolerance'], cfg.gamma)

    averaged = averaged_detector_state(result.as_povm(scheme), cfg.gamma)
    errors = result.bootstrap_errors or [None] * len(result.variances)
    store.write_json('tomography.json', result.to_dict())
    store.write_rows('tomography_variance.csv', ['m_bin', 'variance', 'error'],
                     [(i, v, e if e is not None else '') for i, (v, e) in enumerate(zip(result.variances, errors))])
    store.write_rows('frequencies.csv', ['amplitude', 'sector'] + [f'bin_{i}' for i in range(scheme.n_bins)]
                     + ['overflow', 'rejected'],
                     [[float(a), int(s)] + [int(c) for c in row] + [int(o), int(r)]
                      for a, s, row, o, r in zip(freqs.amplitudes, freqs.sectors, freqs.counts, freqs.overflow,
                                                 freqs.rejected)])
    store.write_rows('safety_range.csv', ['m_bin', 'r', 'boundary_events'],
                     [(s.m_bin, s.r, s.boundary_events)
                      for s in safety_range(table, scheme, 0, probe_set.boundary_amplitude)])
    save_operator(averaged.operator, store.path('detector_state.json'))
    store.add_file('detector_state.json')
    store.write_json('tomo_summary.json', {
        'records': len(table),
        'in_window': freqs.in_window,
        'converged': result.converged,
        'iterations': result.iterations,
        'averaged_variance': averaged.variance,
    })
    logger.info(f"Reconstructed {scheme.n_bins} bins: averaged variance {averaged.variance:.4f}")
    if not result.converged and tomo['require_convergence']:
        raise NotConverged(f"reconstruction did not converge within {tomo['max_iter']} iterations")
    return True


def handle_wigner(cfg: RunConfig, store: RunStore, source: Path) -> bool:
    """Rasterize a stored operator on the configured square grid"""
    op = load_operator(source)
    w_cfg = cfg['wigner']
    axis = np.linspace(-w_cfg['extent'], w_cfg['extent'], w_cfg['points'])
    with store.timed('wigner'):
        w = wigner_grid(op.normalized(), axis, axis)
    write_wigner_csv(store.path('wigner.csv'), axis, axis, w)
    store.add_file('wigner.csv')
    disk = np.sqrt(2) * float(cfg['probes']['max_amplitude'])
    store.write_json('wigner_summary.json', {
        'min': float(w.min()),
        'max': float(w.max()),
        'ripple_outside_probe_disk': ripple_amplitude(op, disk, axis, axis),
        'probe_disk_radius': disk,
    })
    return True


def handle_bound(cfg: RunConfig, store: RunStore) -> bool:
    """Smallest var(p + gamma x^2) over pure Gaussian states"""
    with store.timed('bound'):
        bound = gaussian_bound(cfg.gamma)
    store.write_json('bound.json', asdict(bound))
    print(f"Gaussian bound at gamma={cfg.gamma}: {bound.value:.6f}"
          + ("" if bound.attained else " (infimum, not attained)"))
    return True


def handle_lut_check(cfg: RunConfig, store: RunStore) -> bool:
    """Exact against tabulated angles, table export and latency budget"""
    table = cfg.lut_table()
    export_table_csv(table, store.path('lut_table.csv'))
    store.add_file('lut_table.csv')
    q = np.linspace(-table.full_scale, table.full_scale - table.input_step, 4001)
    theta_lut, _, codes = lut_eval_array(q, table)
    exact = exact_theta(q, cfg.gamma)
    store.write_rows('lut_comparison.csv', ['q', 'theta_exact', 'theta_lut', 'output_code', 'error'],
                     [(float(a), float(b), float(c), int(k), float(c - b))
                      for a, b, c, k in zip(q, exact, theta_lut, codes)])
    report = latency_report(default_latency_budget())
    store.write_json('latency.json', report)
    worst = max_angle_error(table)
    store.write_json('lut_summary.json', {
        'max_angle_error': worst,
        'error_bound': error_bound(table),
        'monotone': is_monotone(table),
        'total_latency_ns': report['total_ns'],
    })
    logger.info(f"LUT max error {worst:.3g} rad (bound {error_bound(table):.3g}); {report['note']}")
    return True


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='JSON run configuration')
    common.add_argument('--seed', type=int, help='Random seed (required unless set in the config)')
    common.add_argument('--out', metavar='DIR', help='Output directory')
    common.add_argument('--threads', type=int, help='Worker threads')
    common.add_argument('--replay', action='store_true', help='Single-threaded run with timing-free manifest')
    common.add_argument('--set', dest='assignments', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. --set loss.eta1=0.97')
    common.add_argument('--verbose', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(description='Nonlinear Quadrature Sim - feedforward measurement toolkit')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == 'tomo':
            p.add_argument('--records', metavar='CSV', required=True, help='Record file from simulate')
        if name == 'wigner':
            p.add_argument('--input', metavar='JSON', required=True, help='Operator container file')
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code"""
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.seed, args.out, args.threads, args.replay, args.assignments)
    except (ConfigError, FileFormatError) as e:
        setup_logging(None, args.verbose)
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    out_dir = Path(cfg['out_dir'])
    setup_logging(out_dir, args.verbose)
    logger.info(f"Running '{args.command}' (config {cfg.hash()[:12]}, seed {cfg.seed}, threads {cfg.threads})")
    store = RunStore(out_dir, replay=cfg.replay)

    try:
        if args.command == 'simulate':
            success = handle_simulate(cfg, store)
        elif args.command == 'moments':
            success = handle_moments(cfg, store)
        elif args.command == 'povm':
            success = handle_povm(cfg, store)
        elif args.command == 'tomo':
            if not Path(args.records).exists():
                raise FileFormatError(f"record file not found: {args.records}")
            success = handle_tomo(cfg, store, Path(args.records))
        elif args.command == 'wigner':
            success = handle_wigner(cfg, store, Path(args.input))
        elif args.command == 'bound':
            success = handle_bound(cfg, store)
        else:
            success = handle_lut_check(cfg, store)
        store.write_manifest(args.command, cfg)
        return EXIT_OK if success else EXIT_FAILURE
    except (ConfigError, FileFormatError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_CONFIG
    except ConvergenceError as e:
        logger.error(f"Numerical convergence failure: {e}")
        return EXIT_CONVERGENCE
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return EXIT_INTERRUPTED
    except Exception as e:
        logger.exception(f"Command '{args.command}' failed: {e}")
        return EXIT_FAILURE
    finally:
        log_resources()


def main():
    """Main entry point"""
    sys.exit(run())


if __name__ == '__main__':
    main()
