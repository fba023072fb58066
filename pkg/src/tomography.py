"""
Tomography Module
Detector tomography of the feedforward measurement: coherent probe
generation and calibration, grouping of shots into probe classes,
binning of outcomes, safety-range analysis, maximum-likelihood POVM
reconstruction and bootstrap error bars.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

from circuit import RecordTable
from exceptions import FitDegenerate
from fock import FockOperator, operator_to_json
from povm import PovmElement
from states import NonlinearQuadratureSpec, nonlinear_variance

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-300
EIGENVALUE_FLOOR = 1e-12
MIN_CALIBRATION_RECORDS = 100
MIN_PHASE_COVERAGE = 0.1  # share of a full cycle
# Relative likelihood drop still treated as a rounding tie
LIKELIHOOD_SLACK = 1e-12


@dataclass(frozen=True)
class ProbeSet:
    """
    Coherent probes at fixed amplitudes |alpha| with uniformly random phase

    The default grid is 27 amplitudes from 0 to 3.5 with 80000 shots each.
    """
    amplitudes: Tuple[float, ...] = tuple(np.linspace(0.0, 3.5, 27))
    shots_per_amplitude: int = 80000
    phase_sectors: int = 1

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=float)
        if amps.size == 0:
            raise ValueError("probe set needs at least one amplitude")
        if np.any(amps < 0):
            raise ValueError("probe amplitudes must be nonnegative")
        if np.any(np.diff(amps) < 0):
            raise ValueError("probe amplitudes must be sorted")
        if self.shots_per_amplitude < 1:
            raise ValueError("shots_per_amplitude must be positive")
        if self.phase_sectors < 1:
            raise ValueError("phase_sectors must be positive")

    @classmethod
    def evenly_spaced(cls, n_amplitudes: int = 27, max_amplitude: float = 3.5, shots_per_amplitude: int = 80000,
                      phase_sectors: int = 1) -> 'ProbeSet':
        return cls(tuple(float(a) for a in np.linspace(0.0, max_amplitude, n_amplitudes)),
                   shots_per_amplitude, phase_sectors)

    @property
    def total_shots(self) -> int:
        return len(self.amplitudes) * self.shots_per_amplitude

    @property
    def boundary_amplitude(self) -> float:
        return float(self.amplitudes[-1])


@dataclass(frozen=True)
class BinningScheme:
    """Equal m-bins on [m_min, m_max) inside the window |q| < q_window"""
    n_bins: int = 20
    m_min: float = -1.0
    m_max: float = 1.0
    q_window: float = 0.6

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        if not self.m_max > self.m_min:
            raise ValueError("m_max must exceed m_min")
        if self.q_window <= 0:
            raise ValueError("q_window must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.m_min, self.m_max, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def bin_index(self, m: np.ndarray) -> np.ndarray:
        """Bin of each m, -1 outside [m_min, m_max)"""
        m = np.asarray(m, dtype=float)
        width = (self.m_max - self.m_min) / self.n_bins
        idx = np.floor((m - self.m_min) / width).astype(np.int64)
        idx = np.minimum(idx, self.n_bins - 1)
        inside = (m >= self.m_min) & (m < self.m_max)
        return np.where(inside, idx, -1)


@dataclass
class FrequencyTable:
    """
    Counts f_jm per probe group j and m-bin

    `overflow` holds in-window events with m outside the binned range and
    `rejected` the events outside the q-window. The reconstruction merges
    both into one complement outcome.
    """
    counts: np.ndarray
    overflow: np.ndarray
    rejected: np.ndarray
    amplitudes: np.ndarray
    sectors: np.ndarray

    @property
    def n_groups(self) -> int:
        return int(self.counts.shape[0])

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1) + self.overflow + self.rejected

    @property
    def in_window(self) -> int:
        return int(self.counts.sum())

    def outcome_counts(self) -> np.ndarray:
        """(groups, bins + 1) with the complement outcome last"""
        return np.column_stack([self.counts, self.overflow + self.rejected]).astype(float)


@dataclass(frozen=True)
class ProbeCalibration:
    amplitude: float
    phase_offset: float
    x0: float
    p0: float
    residual_rms: float
    records: int


@dataclass(frozen=True)
class SafetyRange:
    m_bin: int
    r: float
    unbounded: bool
    boundary_events: int


@dataclass
class TomographyResult:
    """Reconstructed elements, bins first and the complement last"""
    elements: List[FockOperator]
    iterations: int
    log_likelihood: List[float]
    converged: bool
    positivity_defect: float = 0.0
    variances: List[float] = field(default_factory=list)
    bootstrap_errors: Optional[List[float]] = None
    diluted_steps: int = 0

    @property
    def bins(self) -> List[FockOperator]:
        return self.elements[:-1]

    def as_povm(self, scheme: BinningScheme) -> List[PovmElement]:
        return [PovmElement(op, label=('bin', i), m=float(c))
                for i, (op, c) in enumerate(zip(self.bins, scheme.centers))]

    def to_dict(self) -> Dict:
        return {
            'iterations': self.iterations,
            'converged': self.converged,
            'positivity_defect': self.positivity_defect,
            'diluted_steps': self.diluted_steps,
            'log_likelihood': self.log_likelihood[-1] if self.log_likelihood else None,
            'variances': self.variances,
            'bootstrap_errors': self.bootstrap_errors,
            'elements': [operator_to_json(op) for op in self.elements],
        }


def generate_probe_set(spec: ProbeSet, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Probe quadrature means (alpha_x, alpha_p) for every shot, amplitude-major

    Phases are drawn uniformly on [0, 2 pi) per shot.
    """
    amps = np.repeat(np.asarray(spec.amplitudes, dtype=float), spec.shots_per_amplitude)
    phases = rng.uniform(0.0, 2 * np.pi, size=amps.size)
    scale = np.sqrt(2.0) * amps
    logger.info(f"Generated {amps.size} probes over {len(spec.amplitudes)} amplitudes")
    return scale * np.cos(phases), scale * np.sin(phases)


def _phase_coverage(phase: np.ndarray) -> float:
    """Share of the circle not inside the largest gap between samples"""
    p = np.sort(np.mod(phase, 2 * np.pi))
    gaps = np.diff(np.concatenate([p, [p[0] + 2 * np.pi]]))
    return 1.0 - float(gaps.max()) / (2 * np.pi)


def fit_probe_calibration(phase: np.ndarray, q: np.ndarray, y: np.ndarray) -> ProbeCalibration:
    """
    Least-squares fit of q + iy = A exp(i(phi_offset - phase)) + (x0 + i p0)

    Args:
        phase: reference phase of each heterodyne record
        q: first homodyne outcomes
        y: second homodyne outcomes

    Returns:
        ProbeCalibration with the residual RMS

    Raises:
        FitDegenerate: fewer than 100 records or under 10% phase coverage
    """
    phase = np.asarray(phase, dtype=float)
    z = np.asarray(q, dtype=float) + 1j * np.asarray(y, dtype=float)
    if phase.size < MIN_CALIBRATION_RECORDS:
        raise FitDegenerate(f"calibration needs at least {MIN_CALIBRATION_RECORDS} records, got {phase.size}")
    coverage = _phase_coverage(phase)
    if coverage < MIN_PHASE_COVERAGE:
        raise FitDegenerate(f"phase coverage {coverage:.3f} of a cycle is too small")
    if coverage < 0.5:
        logger.warning(f"Calibration phases cover only {coverage:.2f} of a cycle")
    design = np.column_stack([np.exp(-1j * phase), np.ones_like(phase)])
    (c, d), _, _, _ = np.linalg.lstsq(design, z, rcond=None)
    resid = z - design @ np.array([c, d])
    rms = float(np.sqrt(np.mean(np.abs(resid) ** 2)))
    cal = ProbeCalibration(float(abs(c)), float(np.angle(c)), float(d.real), float(d.imag), rms, int(phase.size))
    logger.info(f"Probe calibration: A={cal.amplitude:.4f}, offset={cal.phase_offset:.4f}, "
                f"x0={cal.x0:.4f}, p0={cal.p0:.4f}, rms={rms:.4f}")
    return cal


def calibrate_records(table: RecordTable, calibration: ProbeCalibration,
                      nominal_amplitude: Optional[float] = None) -> RecordTable:
    """
    Replace nominal probe columns with calibrated ones

    The complex amplitude becomes s |alpha| exp(i(arg alpha + phi_offset))
    plus the fitted offset, with s = A / nominal_amplitude (1 if omitted).
    """
    scale = 1.0 if not nominal_amplitude else calibration.amplitude / nominal_amplitude
    alpha = (table.probe_ax + 1j * table.probe_ap) / np.sqrt(2)
    alpha = scale * alpha * np.exp(1j * calibration.phase_offset) + (calibration.x0 + 1j * calibration.p0)
    return RecordTable(np.sqrt(2) * alpha.real, np.sqrt(2) * alpha.imag,
                       table.q.copy(), table.y.copy(), table.m.copy(), table.theta.copy())


def assign_groups(table: RecordTable, probe_grid: Optional[Sequence[float]] = None,
                  sectors: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Probe class of each record: nearest grid amplitude times phase sector

    Returns:
        (group index per record, amplitude grid)
    """
    if probe_grid is None:
        grid = np.unique(np.round(table.amplitude, 9)) if len(table) else np.zeros(0)
    else:
        grid = np.asarray(probe_grid, dtype=float)
    if len(table) == 0 or grid.size == 0:
        return np.zeros(0, dtype=np.int64), grid
    amp_idx = np.abs(table.amplitude[:, None] - grid[None, :]).argmin(axis=1)
    sector = np.minimum((table.phase / (2 * np.pi) * sectors).astype(np.int64), sectors - 1)
    return amp_idx * sectors + sector, grid


def bin_outcomes(table: RecordTable, scheme: BinningScheme, probe_grid: Optional[Sequence[float]] = None,
                 sectors: int = 1) -> FrequencyTable:
    """Count records per (probe group, m-bin); every in-window record lands in exactly one bin or overflow"""
    groups, grid = assign_groups(table, probe_grid, sectors)
    n_groups = grid.size * sectors
    counts = np.zeros((n_groups, scheme.n_bins), dtype=np.int64)
    overflow = np.zeros(n_groups, dtype=np.int64)
    rejected = np.zeros(n_groups, dtype=np.int64)
    if len(table):
        window = np.abs(table.q) < scheme.q_window
        bins = scheme.bin_index(table.m)
        binned = window & (bins >= 0)
        np.add.at(counts, (groups[binned], bins[binned]), 1)
        overflow = np.bincount(groups[window & (bins < 0)], minlength=n_groups)
        rejected = np.bincount(groups[~window], minlength=n_groups)
    amplitudes = np.repeat(grid, sectors)
    sector_ids = np.tile(np.arange(sectors), grid.size)
    freqs = FrequencyTable(counts, overflow, rejected, amplitudes, sector_ids)
    logger.info(f"Binned {len(table)} records: {freqs.in_window} in bins, {int(overflow.sum())} overflow, "
                f"{int(rejected.sum())} outside |q|<{scheme.q_window}")
    return freqs


def _coherent_kets(alpha: np.ndarray, dim: int) -> np.ndarray:
    """Rows are truncated coherent kets"""
    n = np.arange(dim)
    log_norm = -0.5 * np.abs(alpha) ** 2
    log_fact = 0.5 * np.cumsum(np.concatenate([[0.0], np.log(n[1:])]))
    powers = np.power(alpha[:, None], n[None, :])
    return np.exp(log_norm)[:, None] * powers * np.exp(-log_fact)[None, :]


def probe_operators(table: RecordTable, n_max: int, probe_grid: Optional[Sequence[float]] = None,
                    sectors: int = 1) -> np.ndarray:
    """
    Average coherent state of the actual shots in every probe group

    Returns:
        array (groups, n_max + 1, n_max + 1); groups without shots are zero
    """
    groups, grid = assign_groups(table, probe_grid, sectors)
    dim = n_max + 1
    ops = np.zeros((grid.size * sectors, dim, dim), dtype=complex)
    if len(table) == 0:
        return ops
    alpha = (table.probe_ax + 1j * table.probe_ap) / np.sqrt(2)
    order = np.argsort(groups, kind='stable')
    bounds = np.searchsorted(groups[order], np.arange(ops.shape[0] + 1))
    for j in range(ops.shape[0]):
        sel = order[bounds[j]:bounds[j + 1]]
        if sel.size == 0:
            continue
        kets = _coherent_kets(alpha[sel], dim)
        ops[j] = kets.T @ kets.conj() / sel.size
    return ops


def safety_range(table: RecordTable, scheme: BinningScheme, threshold: float = 0,
                 boundary_amplitude: Optional[float] = None, tolerance: float = 1e-6) -> List[SafetyRange]:
    """
    Smallest r per m-bin with at most `threshold` boundary-probe events in |q| < r

    r is the (threshold + 1)-th smallest |q| among boundary events in the bin.
    An infinite threshold gives an unbounded flag. With too few boundary
    events r is the largest |q| in the data (the scheme window if empty).
    """
    full = float(np.max(np.abs(table.q))) if len(table) else scheme.q_window
    if boundary_amplitude is None:
        boundary_amplitude = float(np.max(table.amplitude)) if len(table) else 0.0
    on_boundary = np.abs(table.amplitude - boundary_amplitude) <= tolerance * max(boundary_amplitude, 1.0)
    bins = scheme.bin_index(table.m)
    rows = []
    for b in range(scheme.n_bins):
        absq = np.sort(np.abs(table.q[on_boundary & (bins == b)]))
        if np.isinf(threshold):
            rows.append(SafetyRange(b, np.inf, True, int(absq.size)))
            continue
        n = int(threshold)
        r = float(absq[n]) if absq.size > n else full
        rows.append(SafetyRange(b, r, False, int(absq.size)))
    return rows


def _probabilities(probes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = np.einsum('jab,kba->jk', probes, elements).real
    return np.maximum(p, PROBABILITY_FLOOR)


def _log_likelihood(freqs: np.ndarray, p: np.ndarray) -> float:
    return float(np.sum(freqs * np.log(p)))


def _inverse_sqrt(lam: np.ndarray) -> np.ndarray:
    w, v = eigh(0.5 * (lam + lam.conj().T))
    return (v / np.sqrt(np.maximum(w, EIGENVALUE_FLOOR))) @ v.conj().T


def _project_psd(op: np.ndarray) -> Tuple[np.ndarray, float]:
    herm = 0.5 * (op + op.conj().T)
    w, v = eigh(herm)
    if w[0] >= 0:
        return herm, 0.0
    return (v * np.maximum(w, 0.0)) @ v.conj().T, float(-w[0])


def _mle_step(freqs: np.ndarray, probes: np.ndarray, elements: np.ndarray,
              eps: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    One fixed-point step Pi_k <- L^-1/2 R_k Pi_k R_k L^-1/2

    eps=None uses R_k = sum_j (f_jk / p_jk) rho_j as it stands. A finite eps
    uses the diluted R_k = I + eps sum_j (f_jk / p_jk) rho_j, which tends to
    the plain rule as eps grows since the scale of R cancels against L.
    """
    p = _probabilities(probes, elements)
    weights = freqs / p / max(freqs.sum(), 1.0)
    r = np.einsum('jk,jab->kab', weights, probes)
    if eps is not None:
        r = np.eye(elements.shape[1])[None] + eps * r
    rpr = r @ elements @ r
    s = _inverse_sqrt(rpr.sum(axis=0))
    updated = s[None] @ rpr @ s[None]
    defect = 0.0
    for k in range(updated.shape[0]):
        updated[k], d = _project_psd(updated[k])
        defect = max(defect, d)
    return updated, defect


def mle_reconstruct(freqs: np.ndarray, probes: np.ndarray, max_iter: int = 2000, tolerance: float = 1e-9,
                    initial: Optional[Sequence[FockOperator]] = None,
                    gamma: float = 0.52, warn: bool = True) -> TomographyResult:
    """
    Iterative maximum-likelihood POVM reconstruction

    Each step applies Pi_k <- L^-1/2 R_k Pi_k R_k L^-1/2 with
    R_k = sum_j (f_jk / p_jk) rho_j and L = sum_k R_k Pi_k R_k, so the
    elements sum to the identity. A step that lowers the likelihood, or
    loses completeness because L is singular, is replaced by the diluted
    step with R_k = I + eps sum_j (f_jk / p_jk) rho_j, eps halved until the
    likelihood holds; diluted_steps counts these fallbacks.

    Args:
        freqs: counts (groups, outcomes), the complement outcome included
        probes: probe operators (groups, dim, dim)
        max_iter: iteration budget
        tolerance: relative likelihood gain that counts as converged
        initial: starting elements, I/outcomes if omitted
        gamma: coupling used for the per-bin variance summary
        warn: log a warning when the budget runs out

    Returns:
        TomographyResult; converged=False with a warning when the budget runs out
    """
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs < 0):
        raise ValueError("frequencies must be nonnegative")
    n_out = freqs.shape[1]
    dim = probes.shape[1]
    if initial is None:
        elements = np.repeat((np.eye(dim, dtype=complex) / n_out)[None], n_out, axis=0)
    else:
        elements = np.stack([op.entries for op in initial]).astype(complex)

    t0 = time.perf_counter()
    trace = [_log_likelihood(freqs, _probabilities(probes, elements))]
    eps = 1.0
    converged = False
    defect = 0.0
    diluted = 0
    iterations = 0
    eye = np.eye(dim)
    for iterations in range(1, max_iter + 1):
        current = trace[-1]
        floor = current - LIKELIHOOD_SLACK * abs(current)
        candidate, step_defect = _mle_step(freqs, probes, elements)
        value = _log_likelihood(freqs, _probabilities(probes, candidate))
        step = 'plain'
        # a rank-deficient L breaks completeness of the plain step
        complete = np.allclose(candidate.sum(axis=0), eye, atol=1e-8)
        if value < floor or not complete:
            diluted += 1
            while True:
                candidate, step_defect = _mle_step(freqs, probes, elements, eps)
                value = _log_likelihood(freqs, _probabilities(probes, candidate))
                if value >= floor or eps < 1e-10:
                    break
                eps *= 0.5
            step = f"eps={eps:.3g}"
            if value < floor:
                logger.warning(f"MLE stalled at iteration {iterations}: no step raises the likelihood")
                break
            eps = min(2.0 * eps, 1e6)
        elements = candidate
        defect = max(defect, step_defect)
        trace.append(value)
        gain = (value - current) / max(abs(current), 1e-300)
        logger.debug(f"MLE iteration {iterations}: logL={value:.10g}, {step}, gain={gain:.3g}")
        if gain < tolerance:
            converged = True
            break

    if not converged and warn:
        logger.warning(f"MLE did not converge within {iterations} iterations")
    if diluted:
        logger.info(f"MLE fell back to a diluted step {diluted} time(s)")
    if defect > 1e-10:
        logger.warning(f"MLE positivity defect {defect:.3g}")
    ops = [FockOperator(e) for e in elements]
    spec = NonlinearQuadratureSpec(gamma, 1)
    variances = [_safe_variance(op, spec) for op in ops[:-1]]
    logger.info(f"MLE finished: {iterations} iterations, logL={trace[-1]:.8g}, "
                f"{time.perf_counter() - t0:.2f}s")
    return TomographyResult(ops, iterations, trace, converged, defect, variances, diluted_steps=diluted)


def _safe_variance(op: FockOperator, spec: NonlinearQuadratureSpec) -> float:
    if op.trace() <= 0:
        return float('nan')
    return nonlinear_variance(op.normalized(), spec)


def _resample_counts(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw each group's records with replacement and re-bin them"""
    out = np.zeros_like(counts)
    cells = np.arange(counts.shape[1])
    for j in range(counts.shape[0]):
        n = int(counts[j].sum())
        if n == 0:
            continue
        labels = np.repeat(cells, counts[j].astype(np.int64))
        out[j] = np.bincount(labels[rng.integers(0, n, size=n)], minlength=counts.shape[1])
    return out


def bootstrap_variance(freqs: FrequencyTable, probes: np.ndarray, fit: TomographyResult, rng: np.random.Generator,
                       resamples: int = 100, mode: str = 'cheap', refit_iterations: int = 50,
                       max_iter: int = 2000, tolerance: float = 1e-9, gamma: float = 0.52) -> List[float]:
    """
    Standard deviation of each bin's var(p + gamma x^2) over bootstrap resamples

    Resampling is stratified by probe group. 'cheap' mode warm-starts from
    the full-data fit and runs `refit_iterations` steps; 'full' reruns the
    whole reconstruction.
    """
    if resamples < 50:
        raise ValueError(f"bootstrap needs at least 50 resamples, got {resamples}")
    if mode not in ('cheap', 'full'):
        raise ValueError(f"unknown bootstrap mode '{mode}'")
    counts = freqs.outcome_counts()
    samples = np.zeros((resamples, len(fit.elements) - 1))
    t0 = time.perf_counter()
    for i in range(resamples):
        resampled = _resample_counts(counts, rng)
        if mode == 'cheap':
            refit = mle_reconstruct(resampled, probes, max_iter=refit_iterations, tolerance=0.0,
                                    initial=fit.elements, gamma=gamma, warn=False)
        else:
            refit = mle_reconstruct(resampled, probes, max_iter=max_iter, tolerance=tolerance, gamma=gamma)
        samples[i] = refit.variances
    errors = np.std(samples, axis=0, ddof=1)
    logger.info(f"Bootstrap ({mode}, {resamples} resamples) took {time.perf_counter() - t0:.1f}s")
    fit.bootstrap_errors = [float(e) for e in errors]
    return fit.bootstrap_errors
