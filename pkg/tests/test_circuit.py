import numpy as np
import pytest
from scipy.stats import ks_2samp

from circuit import (FeedforwardPolicy, LossModel, MeasurementRecord, RecordTable, ResidualOffsetParams,
                     DisplacedSampler, fit_moments, heterodyne_baseline, intrinsic_variance, moment_rows_to_dicts,
                     moment_scan, quadrature_grid, residual_offset_correction, sample_homodyne, simulate_batch,
                     simulate_shot, substream)
from exceptions import FileFormatError
from fock import FockConfig, FockOperator, TwoModeState, beamsplitter
from lut import build_lut, error_bound
from states import AncillaSpec, CoherentProbe, ancilla_state, coherent_state

GAMMA = 0.52


@pytest.fixture(scope='module')
def vacuum():
    return ancilla_state(AncillaSpec('vacuum'), FockConfig(n_max=4))


def probe_columns(n, ax=0.0, ap=0.0):
    return np.full(n, ax), np.full(n, ap)


def test_policy_angle_and_gain():
    policy = FeedforwardPolicy(GAMMA)
    q = np.array([-1.0, 0.0, 0.7])
    theta = policy.theta(q)
    assert theta[1] == 0.0
    assert np.allclose(policy.gain(q), np.sqrt(2) / np.cos(theta))
    assert np.allclose(FeedforwardPolicy(GAMMA, 'disabled').theta(q), 0.0)
    with pytest.raises(ValueError):
        FeedforwardPolicy(GAMMA, 'lut')
    with pytest.raises(ValueError):
        FeedforwardPolicy(GAMMA, 'adaptive')


def test_loss_model_validation():
    with pytest.raises(ValueError):
        LossModel(eta1=1.1)


def test_substreams_are_reproducible():
    a = substream(5, 2, 0).uniform(size=4)
    b = substream(5, 2, 0).uniform(size=4)
    c = substream(5, 2, 1).uniform(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_homodyne_on_single_mode_operator():
    cfg = FockConfig(n_max=12)
    state = coherent_state(CoherentProbe(1.0, 0.0), cfg)
    grid = quadrature_grid(cfg.dim, points=801)
    rng = substream(3, 0)
    draws = [sample_homodyne(state, 1, 0.0, 0.8, rng, grid=grid) for _ in range(3000)]
    values = np.array([value for value, _ in draws])
    assert all(conditioned is None for _, conditioned in draws)
    assert np.mean(values) == pytest.approx(np.sqrt(0.8), abs=0.05)
    assert np.var(values) == pytest.approx(0.5, rel=0.1)


def test_loss_formulations_agree():
    cfg = FockConfig(n_max=10)
    state = ancilla_state(AncillaSpec('fock_superposition', [0.8, -0.6j]), cfg)
    grid = quadrature_grid(cfg.dim, points=401)
    noise_rng, conv_rng = substream(4, 0), substream(4, 1)
    noise = [sample_homodyne(state, 1, 0.3, 0.7, noise_rng, grid=grid)[0] for _ in range(1500)]
    conv = [sample_homodyne(state, 1, 0.3, 0.7, conv_rng, grid=grid, loss_model='convolution')[0]
            for _ in range(1500)]
    assert ks_2samp(noise, conv).pvalue > 1e-3


def test_convolution_conditions_the_other_mode():
    dim = 5
    photon = np.zeros(dim, dtype=complex)
    photon[1] = 1.0
    vac = ancilla_state(AncillaSpec('vacuum'), FockConfig(n_max=dim - 1))
    state = beamsplitter(TwoModeState.product(vac, FockOperator.from_ket(photon)), 0.5)
    grid = quadrature_grid(dim, points=201)
    value, conditioned = sample_homodyne(state, 1, 0.0, 0.6, substream(5, 0), grid=grid, loss_model='convolution')
    assert np.isfinite(value)
    assert conditioned.trace() == pytest.approx(1.0, abs=1e-10)
    assert conditioned.min_eigenvalue() > -1e-10
    with pytest.raises(ValueError):
        sample_homodyne(state, 1, 0.0, 0.6, substream(5, 0), loss_model='fourier')


def test_batch_of_vacuum_probes_runs(vacuum):
    table = simulate_batch(np.zeros(10), np.zeros(10), vacuum, FeedforwardPolicy(GAMMA), LossModel(0.97, 0.91),
                           ResidualOffsetParams(), seed=1)
    assert len(table) == 10
    assert np.all(np.isfinite(table.m))


def test_output_independent_of_threads(vacuum):
    ax, ap = probe_columns(2500, 0.8, -0.3)
    policy = FeedforwardPolicy(GAMMA)
    one = simulate_batch(ax, ap, vacuum, policy, LossModel(0.97, 0.91), ResidualOffsetParams(), seed=11,
                         chunk_size=300, threads=1)
    many = simulate_batch(ax, ap, vacuum, policy, LossModel(0.97, 0.91), ResidualOffsetParams(), seed=11,
                          chunk_size=300, threads=4)
    assert len(one) == 2500
    assert np.array_equal(one.m, many.m)
    assert np.array_equal(one.q, many.q)


def test_vacuum_outcome_spread(vacuum):
    ax, ap = probe_columns(20000)
    table = simulate_batch(ax, ap, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(), seed=3)
    # input and ancilla each contribute the vacuum variance of p +- gamma x^2
    assert np.var(table.m) == pytest.approx(2 * (0.5 + 0.5 * GAMMA ** 2), rel=0.05)
    assert np.var(table.q) == pytest.approx(0.5, rel=0.05)


def test_moment_structure(vacuum):
    probes = [CoherentProbe(ax, ap) for ax in (0.0, 0.5, 1.0, 1.5, 2.0) for ap in (0.0, 1.0)]
    rows = moment_scan(probes, 10000, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(), seed=1)
    fit = fit_moments(rows)
    assert fit.quadratic_coeff == pytest.approx(GAMMA, abs=0.05)
    assert fit.p_slope == pytest.approx(1.0, abs=0.05)
    assert fit.variance_slope == pytest.approx(2 * GAMMA ** 2, abs=0.1)
    assert moment_rows_to_dicts(rows)[0]['shots'] == 10000


def test_heterodyne_carries_extra_cross_term(vacuum):
    probes = [CoherentProbe(ax, 0.0) for ax in (0.0, 0.5, 1.0, 1.5, 2.0)]
    rows = moment_scan(probes, 5000, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(),
                       seed=2, heterodyne=True)
    fit = fit_moments(rows)
    assert fit.variance_slope == pytest.approx(4 * GAMMA ** 2, abs=0.15)
    assert rows[-1].excess_noise > rows[0].excess_noise


def test_moment_scan_needs_enough_shots(vacuum):
    with pytest.raises(ValueError):
        moment_scan([CoherentProbe()], 999, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(), 0)


def test_intrinsic_variance():
    assert intrinsic_variance(CoherentProbe(0.0, 3.0), GAMMA) == pytest.approx(0.5 + 0.5 * GAMMA ** 2)
    assert intrinsic_variance(CoherentProbe(1.0, 0.0), GAMMA) == pytest.approx(0.5 + 2.5 * GAMMA ** 2)


def test_heterodyne_baseline_shape(vacuum):
    out = heterodyne_baseline(CoherentProbe(1.0, 0.0), vacuum, GAMMA, substream(0, 5), shots=3000)
    assert out.shape == (3000,)
    assert np.mean(out) == pytest.approx(GAMMA * 1.0 + GAMMA, abs=0.1)


def test_lut_mode_tracks_exact_mode(vacuum):
    ax, ap = probe_columns(5000, 1.2, 0.4)
    table = build_lut(GAMMA)
    exact = simulate_batch(ax, ap, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(), seed=8)
    lut = simulate_batch(ax, ap, vacuum, FeedforwardPolicy(GAMMA, 'lut', table), LossModel(),
                         ResidualOffsetParams(), seed=8)
    assert np.array_equal(exact.q, lut.q)
    assert np.max(np.abs(exact.theta - lut.theta)) <= error_bound(table) + 1e-12
    assert np.mean(np.abs(exact.m - lut.m)) < 0.05


def test_offset_injection_and_correction_cancel(vacuum):
    ax, ap = probe_columns(1000, 2.0, 1.0)
    policy = FeedforwardPolicy(GAMMA)
    plain = simulate_batch(ax, ap, vacuum, policy, LossModel(), ResidualOffsetParams(), seed=4)
    both = simulate_batch(ax, ap, vacuum, policy, LossModel(), ResidualOffsetParams(enabled=True, simulate=True),
                          seed=4)
    dirty = simulate_batch(ax, ap, vacuum, policy, LossModel(), ResidualOffsetParams(simulate=True), seed=4)
    assert np.allclose(plain.y, both.y)
    assert not np.allclose(plain.y, dirty.y)


def test_offset_correction_of_single_record():
    record = MeasurementRecord(CoherentProbe(2.0, 0.0), q=0.3, y=0.5, m=0.7, theta_applied=0.2)
    assert residual_offset_correction(record, 0.0, 0.2, ResidualOffsetParams()) is record
    corrected = residual_offset_correction(record, 0.0, 0.2, ResidualOffsetParams(enabled=True))
    assert corrected.y != record.y
    assert corrected.m == pytest.approx(np.sqrt(2) / np.cos(0.2) * corrected.y)


def test_record_file(tmp_path, vacuum):
    ax, ap = probe_columns(50, 0.3, 0.1)
    table = simulate_batch(ax, ap, vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(), seed=9)
    path = tmp_path / 'records.csv'
    table.to_csv(path)
    loaded = RecordTable.from_csv(path)
    assert np.array_equal(loaded.m, table.m)
    assert next(loaded.records()).probe == CoherentProbe(0.3, 0.1)


def test_record_file_errors(tmp_path):
    with pytest.raises(FileFormatError):
        RecordTable.from_csv(tmp_path / 'missing.csv')
    bad = tmp_path / 'bad.csv'
    bad.write_text('a,b,c\n1,2,3\n')
    with pytest.raises(FileFormatError):
        RecordTable.from_csv(bad)
    empty = tmp_path / 'empty.csv'
    empty.write_text('probe_ax,probe_ap,q,y,m,theta\n')
    assert len(RecordTable.from_csv(empty)) == 0


def test_fock_path_agrees_with_displaced_sampler():
    cfg = FockConfig(n_max=12)
    ancilla = ancilla_state(AncillaSpec('fock_superposition', [0.8, -0.6j]), cfg)
    probe = CoherentProbe(1.0, 0.5)
    policy = FeedforwardPolicy(GAMMA)
    loss = LossModel(0.97, 0.91)
    rng = substream(21, 0)
    fock_m = [simulate_shot(probe, ancilla, policy, loss, ResidualOffsetParams(), rng, method='fock', cfg=cfg).m
              for _ in range(300)]
    sampler = DisplacedSampler(ancilla)
    displaced = sampler.sample(np.full(3000, probe.alpha_x), np.full(3000, probe.alpha_p), policy, loss,
                               ResidualOffsetParams(), substream(21, 1))
    assert ks_2samp(fock_m, displaced.m).pvalue > 1e-3


def test_unknown_shot_method(vacuum):
    with pytest.raises(ValueError):
        simulate_shot(CoherentProbe(), vacuum, FeedforwardPolicy(GAMMA), LossModel(), ResidualOffsetParams(),
                      substream(0), method='wavefunction')
