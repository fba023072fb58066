"""
Circuit Module
Monte-Carlo simulation of the adaptive measurement: the input and the
ancilla meet on a balanced beamsplitter, the first homodyne reads x of
mode 1, the second homodyne is rotated by theta(q) away from p, and the
outcome is m = g(q) y with g(q) = sqrt(2)/cos(theta(q)).

Two sampling paths exist. The production path factors the probe out as a
pair of output displacements so that only the small displacement-free
state of the ancilla is ever sampled; it is vectorized over chunks of
shots. The Fock path propagates the full two-mode density operator and
is kept as the reference implementation.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from exceptions import FileFormatError, GridTooNarrow
from fock import (
    FockConfig,
    FockOperator,
    TwoModeState,
    beamsplitter,
    beamsplitter_unitary,
    hermite_functions,
    quadrature_kets,
    quadrature_wavefunction,
    smeared_weights,
)
from lut import LutTable, exact_theta, lut_eval_array
from states import CoherentProbe, coherent_state

logger = logging.getLogger(__name__)

FEEDFORWARD_MODES = ('exact', 'lut', 'disabled')
VACUUM_VARIANCE = 0.5
RECORD_COLUMNS = ('probe_ax', 'probe_ap', 'q', 'y', 'm', 'theta')

# Named random substreams
STREAM_PROBES = 1
STREAM_SHOTS = 2
STREAM_SCAN = 3
STREAM_BOOTSTRAP = 4
STREAM_BASELINE = 5


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) pair"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass(frozen=True)
class LossModel:
    """Detection efficiencies of the two homodyne detectors"""
    eta1: float = 1.0
    eta2: float = 1.0

    def __post_init__(self):
        for name in ('eta1', 'eta2'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class FeedforwardPolicy:
    """
    Angle law theta(q) = arctan(sqrt(2) gamma q) and gain sqrt(2)/cos(theta)

    In lut mode the applied angle comes from the quantized table while the
    gain is still evaluated at full precision.
    """
    gamma: float = 0.52
    mode: str = 'exact'
    table: Optional[LutTable] = None

    def __post_init__(self):
        if self.mode not in FEEDFORWARD_MODES:
            raise ValueError(f"unknown feedforward mode '{self.mode}', expected one of {FEEDFORWARD_MODES}")
        if self.mode == 'lut' and self.table is None:
            raise ValueError("lut mode needs a table")

    def theta(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.mode == 'disabled':
            return np.zeros_like(q)
        if self.mode == 'lut':
            return lut_eval_array(q, self.table)[0]
        return exact_theta(q, self.gamma)

    def gain(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.mode == 'disabled':
            return np.full_like(q, np.sqrt(2.0))
        return np.sqrt(2.0) * np.sqrt(1.0 + 2.0 * self.gamma ** 2 * q ** 2)


@dataclass(frozen=True)
class ResidualOffsetParams:
    """
    Fitted residual coherent offset on the second homodyne

    c(phi, Theta) = a |alpha| [sin(phi + Theta - b) - sin(phi - b)].
    `simulate` injects the artifact, `enabled` subtracts it.
    """
    amplitude_coeff: float = 0.161
    phase_bias: float = 0.812
    enabled: bool = False
    simulate: bool = False

    def __post_init__(self):
        if self.amplitude_coeff < 0 or self.phase_bias < 0:
            raise ValueError("offset coefficients must be nonnegative")


@dataclass(frozen=True)
class MeasurementRecord:
    probe: CoherentProbe
    q: float
    y: float
    m: float
    theta_applied: float


@dataclass
class RecordTable:
    """Column store of measurement records"""
    probe_ax: np.ndarray
    probe_ap: np.ndarray
    q: np.ndarray
    y: np.ndarray
    m: np.ndarray
    theta: np.ndarray

    def __len__(self) -> int:
        return int(self.q.size)

    @classmethod
    def empty(cls) -> 'RecordTable':
        return cls(*[np.zeros(0) for _ in RECORD_COLUMNS])

    @classmethod
    def concat(cls, tables: Sequence['RecordTable']) -> 'RecordTable':
        if not tables:
            return cls.empty()
        return cls(*[np.concatenate([getattr(t, c) for t in tables]) for c in RECORD_COLUMNS])

    def take(self, index: np.ndarray) -> 'RecordTable':
        return RecordTable(*[getattr(self, c)[index] for c in RECORD_COLUMNS])

    @property
    def amplitude(self) -> np.ndarray:
        return np.sqrt(0.5 * (self.probe_ax ** 2 + self.probe_ap ** 2))

    @property
    def phase(self) -> np.ndarray:
        return np.mod(np.arctan2(self.probe_ap, self.probe_ax), 2 * np.pi)

    def records(self) -> Iterator[MeasurementRecord]:
        for i in range(len(self)):
            yield MeasurementRecord(CoherentProbe(float(self.probe_ax[i]), float(self.probe_ap[i])),
                                    float(self.q[i]), float(self.y[i]), float(self.m[i]), float(self.theta[i]))

    def to_csv(self, path):
        data = np.column_stack([getattr(self, c) for c in RECORD_COLUMNS])
        np.savetxt(path, data, fmt='%.17g', delimiter=',', header=','.join(RECORD_COLUMNS), comments='')

    @classmethod
    def from_csv(cls, path) -> 'RecordTable':
        """
        Load a record file

        Raises:
            FileFormatError: missing file or header mismatch
        """
        try:
            with open(path, 'r', encoding='utf-8') as f:
                header = next(csv.reader(f), [])
        except OSError as e:
            raise FileFormatError(f"cannot read record file {path}: {e}") from e
        if tuple(h.strip() for h in header) != RECORD_COLUMNS:
            raise FileFormatError(f"record file {path} has columns {header}, expected {list(RECORD_COLUMNS)}")
        try:
            data = np.loadtxt(path, delimiter=',', skiprows=1, ndmin=2)
        except ValueError as e:
            raise FileFormatError(f"error parsing record file {path}: {e}") from e
        if data.size == 0:
            return cls.empty()
        return cls(*[data[:, i].copy() for i in range(len(RECORD_COLUMNS))])


def residual_offset(amplitude, phase, theta_applied, params: ResidualOffsetParams) -> np.ndarray:
    return params.amplitude_coeff * np.asarray(amplitude) * (
        np.sin(np.asarray(phase) + theta_applied - params.phase_bias)
        - np.sin(np.asarray(phase) - params.phase_bias)
    )


def residual_offset_correction(record: MeasurementRecord, probe_phase: float, theta: float,
                               params: ResidualOffsetParams,
                               gain: Optional[float] = None) -> MeasurementRecord:
    """
    Subtract c(phi, Theta) from y before the gain

    The gain defaults to sqrt(2)/cos(Theta), which is the exact-mode gain.
    """
    if not params.enabled:
        return record
    c = float(residual_offset(record.probe.amplitude, probe_phase, theta, params))
    g = gain if gain is not None else np.sqrt(2.0) / np.cos(theta)
    y = record.y - c
    return replace(record, y=y, m=g * y)


def quadrature_grid(dim: int, shift: float = 0.0, points: int = 4096) -> np.ndarray:
    """Grid wide enough for every Hermite function below `dim`, plus a mean shift"""
    half = np.sqrt(2 * (dim - 1) + 1) + 6.0 + abs(shift)
    return np.linspace(-half, half, points)


def _inverse_cdf(density: np.ndarray, grid: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling of densities tabulated on a shared grid"""
    uniforms = np.asarray(uniforms, dtype=float)
    cdf = cumulative_trapezoid(density, grid, axis=-1, initial=0.0)
    cdf = cdf / cdf[..., -1:]
    # a single density serves every uniform
    cdf = np.broadcast_to(cdf, uniforms.shape + grid.shape)
    idx = np.sum(cdf < uniforms[..., None], axis=-1)
    idx = np.clip(idx, 1, grid.size - 1)
    lo = np.take_along_axis(cdf, (idx - 1)[..., None], axis=-1)[..., 0]
    hi = np.take_along_axis(cdf, idx[..., None], axis=-1)[..., 0]
    frac = np.where(hi > lo, (uniforms - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
    return grid[idx - 1] + frac * (grid[idx] - grid[idx - 1])


def _condition_on(tensor: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unnormalized state of mode 2 after projecting mode 1 with a Fock-basis weight matrix"""
    return np.einsum('ab,aibj->ij', weights, tensor)


def sample_homodyne(state: Union[TwoModeState, FockOperator], mode: int, theta: float, eta: float,
                    rng: np.random.Generator, grid: Optional[np.ndarray] = None,
                    loss_model: str = 'noise') -> Tuple[float, Optional[FockOperator]]:
    """
    Lossy homodyne measurement of one mode

    Args:
        state: two-mode state, or a single-mode operator
        mode: measured mode of a two-mode state (1 or 2)
        theta: quadrature angle, x cos(theta) + p sin(theta)
        eta: detection efficiency
        rng: random generator
        grid: quadrature grid for the inverse-CDF draw
        loss_model: 'noise' draws the ideal value then scales and adds vacuum
            noise; 'convolution' draws from the Gaussian-smeared projector
            marginal Tr[rho Pi_eta(q|theta)]

    Returns:
        (outcome, normalized conditional state of the other mode or None)

    Raises:
        GridTooNarrow: the grid misses more than 0.1% of the marginal
    """
    if loss_model not in ('noise', 'convolution'):
        raise ValueError(f"unknown loss model '{loss_model}'")
    two_mode = isinstance(state, TwoModeState)
    if two_mode:
        tensor = state.tensor()
        if mode == 2:
            tensor = tensor.transpose(1, 0, 3, 2)
        elif mode != 1:
            raise ValueError(f"mode must be 1 or 2, got {mode}")
        reduced = FockOperator(np.einsum('ajbj->ab', tensor))
    else:
        tensor = None
        reduced = state
    dim = reduced.dim
    if grid is None:
        grid = quadrature_grid(dim)
    density = quadrature_wavefunction(reduced, theta, grid)
    kets = quadrature_kets(dim, theta, grid)

    if loss_model == 'noise' or eta >= 1.0:
        u = float(_inverse_cdf(density, grid, rng.uniform(size=1))[0])
        value = np.sqrt(eta) * u + np.sqrt((1.0 - eta) * VACUUM_VARIANCE) * rng.standard_normal()
        if not two_mode:
            return float(value), None
        ket = quadrature_kets(dim, theta, np.array([u]))[:, 0]
        weights = np.outer(ket.conj(), ket)
    else:
        smeared = smeared_weights(grid, grid, eta)
        lossy = smeared @ (density * _trapezoid_weights(grid))
        if trapezoid(lossy, grid) < 0.999 * trapezoid(density, grid):
            raise GridTooNarrow("grid too narrow for the loss-broadened marginal")
        value = float(_inverse_cdf(lossy, grid, rng.uniform(size=1))[0])
        if not two_mode:
            return value, None
        w = smeared_weights(np.array([value]), grid, eta)[0] * _trapezoid_weights(grid)
        weights = np.einsum('u,au,bu->ab', w, kets.conj(), kets)
    conditioned = _condition_on(tensor, weights)
    return float(value), FockOperator(conditioned).normalized()


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    dx = np.diff(grid)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


class DisplacedSampler:
    """
    Sequential conditional sampler on the displacement-free output state

    The output of the balanced beamsplitter is D1(alpha/sqrt2) D2(alpha/sqrt2)
    applied to B(|0> x rho_anc)B^dag. That fixed state carries at most as
    many photons as the ancilla, so it is built once in a small box and both
    homodyne draws happen on it; the probe only shifts the outcomes.
    """

    def __init__(self, ancilla: FockOperator, grid_points: int = 2048):
        herm = 0.5 * (ancilla.entries + ancilla.entries.conj().T)
        herm = herm / np.trace(herm).real
        evals, evecs = np.linalg.eigh(herm)
        keep = evals > 1e-12 * evals.max()
        self.weights = evals[keep] / evals[keep].sum()
        vecs = evecs[:, keep]
        support = np.nonzero(np.max(np.abs(vecs), axis=1) > 1e-12)[0]
        self.dim = int(support.max()) + 1 if support.size else 1
        vecs = vecs[:self.dim]

        bs = beamsplitter_unitary(self.dim, 0.5)
        vac = np.zeros(self.dim)
        vac[0] = 1.0
        self.amplitudes = np.stack([
            (bs @ np.kron(vac, vecs[:, k])).reshape(self.dim, self.dim) for k in range(vecs.shape[1])
        ])
        self.grid = quadrature_grid(self.dim, points=grid_points)
        self.hermite = hermite_functions(self.dim, self.grid)
        # marginal of x on mode 1 per mixture component
        cond = np.einsum('mg,kmn->kgn', self.hermite, self.amplitudes)
        self.first_density = np.sum(np.abs(cond) ** 2, axis=-1)
        captured = trapezoid(self.first_density, self.grid, axis=-1)
        if np.any(captured < 0.999):
            raise GridTooNarrow(f"sampling grid captures only {captured.min():.5f} of the first homodyne marginal")
        logger.debug(f"Displaced sampler: {self.weights.size} component(s), dim {self.dim}")

    def sample(self, probe_ax: np.ndarray, probe_ap: np.ndarray, policy: FeedforwardPolicy,
               loss: LossModel, offset: ResidualOffsetParams,
               rng: np.random.Generator) -> RecordTable:
        n = probe_ax.size
        # draw order is fixed so every feedforward mode consumes the same numbers
        pick = rng.uniform(size=n)
        first_u = rng.uniform(size=n)
        first_noise = rng.standard_normal(n)
        second_u = rng.uniform(size=n)
        second_noise = rng.standard_normal(n)

        comp = np.searchsorted(np.cumsum(self.weights)[:-1], pick, side='right')
        u1 = np.empty(n)
        for k in np.unique(comp):
            sel = comp == k
            u1[sel] = _inverse_cdf(self.first_density[k], self.grid, first_u[sel])

        x1 = u1 + probe_ax / np.sqrt(2)
        q = np.sqrt(loss.eta1) * x1 + np.sqrt((1.0 - loss.eta1) * VACUUM_VARIANCE) * first_noise
        theta = policy.theta(q)

        # conditional ket of mode 2 at the ideal first outcome
        h_at = hermite_functions(self.dim, u1)
        cond = np.einsum('mb,bmn->bn', h_at, self.amplitudes[comp])
        phi2 = 0.5 * np.pi - theta
        rotated = cond * np.exp(-1j * phi2[:, None] * np.arange(self.dim))
        density = np.abs(rotated @ self.hermite) ** 2
        w_free = _inverse_cdf(density, self.grid, second_u)

        w = w_free + (probe_ax * np.sin(theta) + probe_ap * np.cos(theta)) / np.sqrt(2)
        y = np.sqrt(loss.eta2) * w + np.sqrt((1.0 - loss.eta2) * VACUUM_VARIANCE) * second_noise
        if offset.simulate or offset.enabled:
            amplitude = np.sqrt(0.5 * (probe_ax ** 2 + probe_ap ** 2))
            c = residual_offset(amplitude, np.arctan2(probe_ap, probe_ax), theta, offset)
            if offset.simulate:
                y = y + c
            if offset.enabled:
                y = y - c
        m = policy.gain(q) * y
        return RecordTable(probe_ax.astype(float), probe_ap.astype(float), q, y, m, theta)


def simulate_batch(probe_ax: np.ndarray, probe_ap: np.ndarray, ancilla: FockOperator,
                   policy: FeedforwardPolicy, loss: LossModel, offset: ResidualOffsetParams,
                   seed: int, stream: Tuple[int, ...] = (STREAM_SHOTS,), chunk_size: int = 1024,
                   threads: int = 1, grid_points: int = 2048,
                   sampler: Optional[DisplacedSampler] = None) -> RecordTable:
    """
    Simulate one shot per probe entry

    Shots are cut into fixed chunks and chunk c draws from the substream
    (seed, *stream, c), so the output does not depend on `threads`.
    """
    probe_ax = np.asarray(probe_ax, dtype=float)
    probe_ap = np.asarray(probe_ap, dtype=float)
    if sampler is None:
        sampler = DisplacedSampler(ancilla, grid_points)
    n = probe_ax.size
    starts = list(range(0, n, chunk_size))

    def run(chunk: int) -> RecordTable:
        lo = starts[chunk]
        hi = min(lo + chunk_size, n)
        rng = substream(seed, *stream, chunk)
        return sampler.sample(probe_ax[lo:hi], probe_ap[lo:hi], policy, loss, offset, rng)

    t0 = time.perf_counter()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(c) for c in range(len(starts))]
    logger.debug(f"Simulated {n} shots in {len(starts)} chunk(s), {time.perf_counter() - t0:.2f}s")
    return RecordTable.concat(parts)


def simulate_shot(input: CoherentProbe, ancilla: FockOperator, policy: FeedforwardPolicy, loss: LossModel,
                  offset: ResidualOffsetParams, rng: np.random.Generator, method: str = 'displaced',
                  cfg: Optional[FockConfig] = None, sampler: Optional[DisplacedSampler] = None) -> MeasurementRecord:
    """
    One pass through the adaptive measurement

    method='displaced' uses the factored sampler; method='fock' mixes the
    full two-mode density operator and samples each homodyne on it.
    """
    if method == 'displaced':
        if sampler is None:
            sampler = DisplacedSampler(ancilla)
        table = sampler.sample(np.array([input.alpha_x]), np.array([input.alpha_p]), policy, loss, offset, rng)
        return next(table.records())
    if method != 'fock':
        raise ValueError(f"unknown method '{method}'")

    cfg = cfg or FockConfig(max(ancilla.dim - 1, 30))
    rho_in = coherent_state(input, cfg)
    state = beamsplitter(TwoModeState.product(rho_in, ancilla.resized(cfg.dim)), 0.5)
    grid = quadrature_grid(cfg.dim, shift=abs(input.alpha_x) + abs(input.alpha_p))
    q, conditioned = sample_homodyne(state, 1, 0.0, loss.eta1, rng, grid)
    theta = float(policy.theta(q))
    y, _ = sample_homodyne(conditioned, 2, 0.5 * np.pi - theta, loss.eta2, rng, grid)
    if offset.simulate:
        y += float(residual_offset(input.amplitude, input.phase, theta, offset))
    record = MeasurementRecord(input, q, y, float(policy.gain(q)) * y, theta)
    if offset.enabled:
        record = residual_offset_correction(record, input.phase, theta, offset, gain=float(policy.gain(q)))
    return record


def heterodyne_baseline(input: CoherentProbe, ancilla: FockOperator, gamma: float, rng: np.random.Generator,
                        shots: int = 1, loss: Optional[LossModel] = None,
                        sampler: Optional[DisplacedSampler] = None) -> np.ndarray:
    """
    Dual-homodyne outcomes post-processed into sqrt(2) p' + 2 gamma q'^2

    The cross term of the processed outcome is -2 gamma x_in x_anc.
    """
    policy = FeedforwardPolicy(gamma=gamma, mode='disabled')
    if sampler is None:
        sampler = DisplacedSampler(ancilla)
    ax = np.full(shots, input.alpha_x)
    ap = np.full(shots, input.alpha_p)
    table = sampler.sample(ax, ap, policy, loss or LossModel(), ResidualOffsetParams(), rng)
    return np.sqrt(2.0) * table.y + 2.0 * gamma * table.q ** 2


def intrinsic_variance(probe: CoherentProbe, gamma: float) -> float:
    """var(p + gamma x^2) of a coherent state"""
    return VACUUM_VARIANCE + 2 * gamma ** 2 * probe.alpha_x ** 2 + 0.5 * gamma ** 2


@dataclass(frozen=True)
class MomentRow:
    alpha_x: float
    alpha_p: float
    mean_m: float
    var_m: float
    excess_noise: float
    shots: int


@dataclass(frozen=True)
class MomentFit:
    """Least-squares structure of a moment scan"""
    quadratic_coeff: float
    quadratic_err: float
    p_slope: float
    p_slope_err: float
    variance_slope: float
    variance_slope_err: float


def moment_scan(probes: Sequence[CoherentProbe], shots: int, ancilla: FockOperator, policy: FeedforwardPolicy,
                loss: LossModel, offset: ResidualOffsetParams, seed: int, heterodyne: bool = False,
                chunk_size: int = 1024, threads: int = 1) -> List[MomentRow]:
    """
    Mean, variance and excess noise of m for each probe

    With heterodyne=True the outcome is the post-processed dual-homodyne
    value instead of the feedforward outcome.
    """
    if shots < 1000:
        raise ValueError(f"moment scans need at least 1000 shots per probe, got {shots}")
    sampler = DisplacedSampler(ancilla)
    rows = []
    for i, probe in enumerate(probes):
        ax = np.full(shots, probe.alpha_x)
        ap = np.full(shots, probe.alpha_p)
        used = FeedforwardPolicy(policy.gamma, 'disabled') if heterodyne else policy
        table = simulate_batch(ax, ap, ancilla, used, loss, offset, seed, stream=(STREAM_SCAN, i),
                               chunk_size=chunk_size, threads=threads, sampler=sampler)
        m = np.sqrt(2.0) * table.y + 2.0 * policy.gamma * table.q ** 2 if heterodyne else table.m
        var_m = float(np.var(m, ddof=1))
        rows.append(MomentRow(probe.alpha_x, probe.alpha_p, float(np.mean(m)), var_m,
                              var_m - intrinsic_variance(probe, policy.gamma), shots))
        logger.info(f"Probe ({probe.alpha_x:.3f}, {probe.alpha_p:.3f}): mean {rows[-1].mean_m:.4f}, var {var_m:.4f}")
    return rows


def _lstsq_with_errors(design: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    coef, _, _, _ = np.linalg.lstsq(design, target, rcond=None)
    dof = max(design.shape[0] - design.shape[1], 1)
    resid = target - design @ coef
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.pinv(design.T @ design)
    return coef, np.sqrt(np.clip(np.diag(cov), 0.0, None))


def fit_moments(rows: Sequence[MomentRow]) -> MomentFit:
    """mean = c0 + c1 ap + c2 ax + c3 ax^2 and var = v0 + v1 ax^2"""
    ax = np.array([r.alpha_x for r in rows])
    ap = np.array([r.alpha_p for r in rows])
    mean = np.array([r.mean_m for r in rows])
    var = np.array([r.var_m for r in rows])
    design = np.column_stack([np.ones_like(ax), ap, ax, ax ** 2])
    coef, err = _lstsq_with_errors(design, mean)
    vcoef, verr = _lstsq_with_errors(np.column_stack([np.ones_like(ax), ax ** 2]), var)
    return MomentFit(float(coef[3]), float(err[3]), float(coef[1]), float(err[1]), float(vcoef[1]), float(verr[1]))


def moment_rows_to_dicts(rows: Sequence[MomentRow]) -> List[Dict]:
    return [asdict(r) for r in rows]
