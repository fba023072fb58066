import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from exceptions import FileFormatError, GridTooNarrow, TruncationError
from fock import (FockConfig, FockOperator, TwoModeState, anti_unitary_T, beamsplitter, displacement,
                  hermite_functions, load_operator, quadrature_matrices, quadrature_wavefunction,
                  ripple_amplitude, save_operator, shear, shear_matrix, smeared_projector, wigner_grid,
                  write_wigner_csv)
from states import CoherentProbe, coherent_ket, coherent_state


def vacuum(dim):
    ket = np.zeros(dim, dtype=complex)
    ket[0] = 1.0
    return FockOperator.from_ket(ket)


def number_state(n, dim):
    ket = np.zeros(dim, dtype=complex)
    ket[n] = 1.0
    return FockOperator.from_ket(ket)


def test_fock_config_rejects_bad_cutoff():
    with pytest.raises(ValueError):
        FockConfig(n_max=0)
    with pytest.raises(ValueError):
        FockConfig(n_max=10, hbar=2.0)
    assert FockConfig(n_max=10).dim == 11


def test_operator_is_read_only():
    op = vacuum(4)
    with pytest.raises(ValueError):
        op.entries[0, 0] = 2.0


def test_canonical_commutator_below_cutoff():
    x, p = quadrature_matrices(12)
    comm = x @ p - p @ x
    assert np.allclose(comm[:11, :11], 1j * np.eye(11))


@given(dx=st.floats(-2.0, 2.0), dp=st.floats(-2.0, 2.0))
@settings(max_examples=25, deadline=None)
def test_displacement_shifts_quadratures(dx, dp):
    cfg = FockConfig(n_max=40)
    d = displacement(dx, dp, cfg).entries
    rho = d @ vacuum(cfg.dim).entries @ d.conj().T
    x, p = quadrature_matrices(cfg.dim)
    state = FockOperator(rho)
    assert state.expect(x).real == pytest.approx(dx, abs=1e-8)
    assert state.expect(p).real == pytest.approx(dp, abs=1e-8)
    assert state.trace() == pytest.approx(1.0, abs=1e-8)


def test_displacement_is_unitary_on_low_block():
    d = displacement(1.0, -0.5, FockConfig(n_max=30)).entries
    block = (d.conj().T @ d)[:15, :15]
    assert np.allclose(block, np.eye(15), atol=1e-10)


def test_large_displacement_raises():
    with pytest.raises(TruncationError):
        displacement(8.0, 0.0, FockConfig(n_max=10))


def test_shear_maps_p_to_p_plus_2kx():
    k = 0.3
    dim = 50
    ket = coherent_ket(1.0 / np.sqrt(2), dim)
    u = shear_matrix(k, dim)
    out = FockOperator.from_ket(u @ ket)
    x, p = quadrature_matrices(dim)
    assert out.expect(x).real == pytest.approx(1.0, abs=1e-6)
    assert out.expect(p).real == pytest.approx(2 * k * 1.0, abs=1e-6)


def test_strong_shear_on_small_space_raises():
    with pytest.raises(TruncationError):
        shear(20.0, FockConfig(n_max=5))
    assert shear(0.0, FockConfig(n_max=5)).entries == pytest.approx(np.eye(6))


def test_shear_across_the_feedforward_window():
    cfg = FockConfig(n_max=30)
    k = np.sqrt(2) * 0.52 * 0.6
    u = shear(k, cfg).entries
    out = FockOperator.from_ket(u @ coherent_ket(0.5 / np.sqrt(2), cfg.dim))
    x, p = quadrature_matrices(cfg.dim)
    assert out.expect(x).real == pytest.approx(0.5, abs=1e-6)
    assert out.expect(p).real == pytest.approx(2 * k * 0.5, abs=1e-6)
    # the top of a truncated shear always leaks
    with pytest.raises(TruncationError):
        shear(k, cfg, block=cfg.dim)


def test_beamsplitter_maps_coherent_pair():
    cfg = FockConfig(n_max=14)
    alpha, beta = 1.0, 0.5j
    first = FockOperator.from_ket(coherent_ket(alpha, cfg.dim))
    second = FockOperator.from_ket(coherent_ket(beta, cfg.dim))
    out = beamsplitter(TwoModeState.product(first, second), 0.5)
    expected = np.kron(coherent_ket((alpha - beta) / np.sqrt(2), cfg.dim),
                       coherent_ket((alpha + beta) / np.sqrt(2), cfg.dim))
    fidelity = np.vdot(expected, out.entries @ expected).real
    assert fidelity == pytest.approx(1.0, abs=1e-6)


def test_beamsplitter_edge_transmittances():
    state = TwoModeState.product(vacuum(4), number_state(1, 4))
    assert beamsplitter(state, 1.0) is state
    with pytest.raises(ValueError):
        beamsplitter(state, 1.5)


def test_reduced_states_of_product():
    a, b = vacuum(5), number_state(2, 5)
    state = TwoModeState.product(a, b)
    assert np.allclose(state.reduced(1).entries, a.entries)
    assert np.allclose(state.reduced(2).entries, b.entries)
    with pytest.raises(ValueError):
        state.reduced(3)


def test_anti_unitary_flips_momentum():
    cfg = FockConfig(n_max=25)
    state = coherent_state(CoherentProbe(0.7, 1.2), cfg)
    flipped = anti_unitary_T(state)
    x, p = quadrature_matrices(cfg.dim)
    assert flipped.expect(x).real == pytest.approx(0.7, abs=1e-8)
    assert flipped.expect(p).real == pytest.approx(-1.2, abs=1e-8)


def test_hermite_functions_are_normalized():
    grid = np.linspace(-15, 15, 6001)
    psi = hermite_functions(40, grid)
    norms = trapezoid(psi ** 2, grid, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-8)
    assert trapezoid(psi[3] * psi[5], grid) == pytest.approx(0.0, abs=1e-10)


def test_vacuum_quadrature_density():
    grid = np.linspace(-8, 8, 1601)
    density = quadrature_wavefunction(vacuum(10), 0.3, grid)
    assert np.allclose(density, np.exp(-grid ** 2) / np.sqrt(np.pi), atol=1e-10)


def test_momentum_angle_sees_p_displacement():
    cfg = FockConfig(n_max=30)
    grid = np.linspace(-8, 10, 3001)
    density = quadrature_wavefunction(coherent_state(CoherentProbe(0.0, 1.5), cfg), np.pi / 2, grid)
    assert trapezoid(grid * density, grid) == pytest.approx(1.5, abs=1e-6)


def test_narrow_grid_raises():
    with pytest.raises(GridTooNarrow):
        quadrature_wavefunction(vacuum(5), 0.0, np.linspace(-0.5, 0.5, 101))


def test_wigner_of_vacuum_and_single_photon():
    xs = np.linspace(-6, 6, 121)
    w0 = wigner_grid(vacuum(6), xs, xs)
    w1 = wigner_grid(number_state(1, 6), xs, xs)
    assert w0[60, 60] == pytest.approx(1 / np.pi, rel=1e-10)
    assert w1[60, 60] == pytest.approx(-1 / np.pi, rel=1e-10)
    total = trapezoid(trapezoid(w0, xs, axis=1), xs)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_ripple_amplitude_outside_disk():
    xs = np.linspace(-6, 6, 61)
    assert ripple_amplitude(vacuum(6), 4.0, xs, xs) < np.exp(-16) / np.pi * 1.01
    assert ripple_amplitude(vacuum(6), 20.0, xs, xs) == 0.0


def test_wigner_csv_layout(tmp_path):
    xs = np.array([-1.0, 0.0, 1.0])
    w = wigner_grid(vacuum(3), xs, xs)
    path = tmp_path / 'wigner.csv'
    write_wigner_csv(path, xs, xs, w)
    lines = path.read_text().splitlines()
    assert lines[0] == 'x,p,W'
    assert len(lines) == 10


def test_operator_file_round_trip(tmp_path):
    op = coherent_state(CoherentProbe(0.5, -0.3), FockConfig(n_max=8))
    path = tmp_path / 'op.json'
    save_operator(op, path)
    assert np.array_equal(load_operator(path).entries, op.entries)


def test_operator_file_errors(tmp_path):
    with pytest.raises(FileFormatError):
        load_operator(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(FileFormatError):
        load_operator(bad)
    wrong = tmp_path / 'wrong.json'
    wrong.write_text(json.dumps({'dim': 3, 'entries': [[1.0, 0.0]]}))
    with pytest.raises(FileFormatError):
        load_operator(wrong)


@pytest.mark.parametrize('eta', [1.0, 0.91, 0.5])
def test_smeared_projector_on_vacuum(eta):
    grid = np.linspace(-10, 10, 2049)
    q = 0.4
    proj = smeared_projector(q, 0.0, eta, 12, grid)
    prob = proj[0, 0].real
    assert prob == pytest.approx(np.exp(-q ** 2) / np.sqrt(np.pi), abs=1e-6)


def test_smeared_projector_is_rank_one_without_loss():
    proj = smeared_projector(0.2, 0.7, 1.0, 10, np.linspace(-8, 8, 101))
    assert np.linalg.matrix_rank(proj, tol=1e-10) == 1
