"""
States Module
Input and ancilla states, the nonlinear-squeezing metric, pure-loss
channels and the Gaussian lower bound on var(p + gamma x^2).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize
from scipy.special import gammaln

from exceptions import OptimizationDidNotConverge, TruncationError
from fock import (
    FockConfig,
    FockOperator,
    check_displacement,
    displacement_matrix,
    load_operator,
    quadrature_matrices,
)

logger = logging.getLogger(__name__)

ANCILLA_KINDS = ('vacuum', 'fock_superposition', 'density_file', 'cubic_phase')

# Extra Fock levels so that X^2 products are exact on the retained block
_MOMENT_PAD = 4


@dataclass(frozen=True)
class AncillaSpec:
    """
    Description of the ancillary state fed to the second beamsplitter port

    `efficiency` sends the state through a pure-loss channel before use.
    """
    kind: str = 'vacuum'
    coefficients: List[complex] = field(default_factory=list)
    path: Optional[str] = None
    efficiency: float = 1.0
    cubic_gamma: float = 0.52
    cubic_squeezing: float = 0.3

    def __post_init__(self):
        if self.kind not in ANCILLA_KINDS:
            raise ValueError(f"unknown ancilla kind '{self.kind}', expected one of {ANCILLA_KINDS}")
        if self.kind == 'fock_superposition':
            if not self.coefficients:
                raise ValueError("fock_superposition needs coefficients")
            norm = float(np.sum(np.abs(np.asarray(self.coefficients, dtype=complex)) ** 2))
            if abs(norm - 1.0) > 1e-9:
                raise ValueError(f"superposition coefficients have norm^2 {norm:.12f}, expected 1")
        if self.kind == 'density_file' and not self.path:
            raise ValueError("density_file needs a path")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if self.cubic_squeezing < 0:
            raise ValueError("cubic_squeezing must be nonnegative")


@dataclass(frozen=True)
class CoherentProbe:
    """Coherent probe with alpha = (alpha_x + i alpha_p)/sqrt(2)"""
    alpha_x: float = 0.0
    alpha_p: float = 0.0

    @classmethod
    def from_polar(cls, amplitude: float, phase: float) -> 'CoherentProbe':
        """Probe with complex amplitude |alpha| e^{i phase}"""
        return cls(np.sqrt(2) * amplitude * np.cos(phase), np.sqrt(2) * amplitude * np.sin(phase))

    @property
    def alpha(self) -> complex:
        return (self.alpha_x + 1j * self.alpha_p) / np.sqrt(2)

    @property
    def amplitude(self) -> float:
        return abs(self.alpha)

    @property
    def phase(self) -> float:
        return float(np.angle(self.alpha))


@dataclass(frozen=True)
class NonlinearQuadratureSpec:
    """Observable P + sign * gamma * X^2"""
    gamma: float = 0.52
    sign: int = 1

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")


@dataclass(frozen=True)
class GaussianBound:
    value: float
    attained: bool
    r: float = 0.0
    phi: float = 0.0
    d: float = 0.0
    dp: float = 0.0
    restarts: int = 0


def coherent_ket(alpha: complex, dim: int) -> np.ndarray:
    n = np.arange(dim)
    if alpha == 0:
        ket = np.zeros(dim, dtype=complex)
        ket[0] = 1.0
        return ket
    log_mag = -0.5 * abs(alpha) ** 2 + n * np.log(abs(alpha)) - 0.5 * gammaln(n + 1)
    return np.exp(log_mag) * np.exp(1j * n * np.angle(alpha))


def coherent_state(probe: CoherentProbe, cfg: FockConfig) -> FockOperator:
    """
    Pure coherent state for a probe

    Raises:
        TruncationError: more than 1e-6 of the norm lies above n_max
    """
    check_displacement(probe.alpha_x, probe.alpha_p, cfg.dim)
    return FockOperator.from_ket(coherent_ket(probe.alpha, cfg.dim))


def squeezed_ket(r: float, phi: float, dx: float, dp: float, dim: int) -> np.ndarray:
    """
    Pure Gaussian ket: vacuum squeezed along the phase-space direction
    (cos phi, sin phi), then displaced by (dx, dp)
    """
    work = dim + 24
    ket = np.zeros(work, dtype=complex)
    k = np.arange((work + 1) // 2)
    log_mag = 0.5 * gammaln(2 * k + 1) - k * np.log(2.0) - gammaln(k + 1) - 0.5 * np.log(np.cosh(r))
    coeffs = np.exp(log_mag) * (-np.tanh(r)) ** k * np.exp(2j * phi * k)
    ket[2 * k] = coeffs
    if dx or dp:
        ket = displacement_matrix((dx + 1j * dp) / np.sqrt(2), work) @ ket
    leaked = float(np.sum(np.abs(ket[dim:]) ** 2))
    if leaked > 1e-6:
        raise TruncationError(f"Gaussian state (r={r:.3g}, d=({dx:.3g}, {dp:.3g})) leaks {leaked:.3g} above n_max={dim - 1}")
    return ket[:dim]


def squeezed_state(r: float, phi: float, dx: float, dp: float, cfg: FockConfig) -> FockOperator:
    return FockOperator.from_ket(squeezed_ket(r, phi, dx, dp, cfg.dim))


def cubic_phase_state(gamma: float, squeezing_r: float, cfg: FockConfig) -> FockOperator:
    """
    Finite-energy approximation of the zero eigenstate of P - gamma X^2

    exp(i gamma X^3 / 3) applied to a P-squeezed vacuum. var(P - gamma X^2)
    equals the vacuum's squeezed P variance exp(-2r)/2 up to truncation.

    Raises:
        TruncationError: more than 1e-6 of the norm lies above n_max
    """
    work = 2 * cfg.dim + 24
    seed_ket = squeezed_ket(squeezing_r, np.pi / 2, 0.0, 0.0, work)
    x, _ = quadrature_matrices(work)
    evals, evecs = eigh(x @ x @ x)
    ket = evecs @ (np.exp(1j * gamma * evals / 3) * (evecs.conj().T @ seed_ket))
    leaked = float(np.sum(np.abs(ket[cfg.dim:]) ** 2))
    if leaked > 1e-6:
        raise TruncationError(f"cubic phase state leaks {leaked:.3g} above n_max={cfg.n_max}")
    ket = ket[:cfg.dim]
    return FockOperator.from_ket(ket / np.linalg.norm(ket))


def ancilla_state(spec: AncillaSpec, cfg: FockConfig) -> FockOperator:
    """
    Density operator of the requested ancilla, after its efficiency loss

    Raises:
        FileFormatError: density_file unreadable or not an operator container
        TruncationError: superposition or cubic state does not fit n_max
    """
    if spec.kind == 'vacuum':
        ket = np.zeros(cfg.dim, dtype=complex)
        ket[0] = 1.0
        op = FockOperator.from_ket(ket)
    elif spec.kind == 'fock_superposition':
        coeffs = np.asarray(spec.coefficients, dtype=complex)
        if coeffs.size > cfg.dim:
            raise TruncationError(f"{coeffs.size} coefficients do not fit n_max={cfg.n_max}")
        ket = np.zeros(cfg.dim, dtype=complex)
        ket[:coeffs.size] = coeffs
        op = FockOperator.from_ket(ket)
    elif spec.kind == 'cubic_phase':
        op = cubic_phase_state(spec.cubic_gamma, spec.cubic_squeezing, cfg)
    else:
        loaded = load_operator(spec.path)
        if loaded.dim > cfg.dim and np.max(np.abs(loaded.entries[cfg.dim:, :])) > 1e-9:
            raise TruncationError(f"density file {spec.path} has support above n_max={cfg.n_max}")
        op = loaded.resized(cfg.dim)
        logger.info(f"Loaded ancilla density from {spec.path} (dim {loaded.dim})")
    if spec.efficiency < 1.0:
        op = apply_loss(op, spec.efficiency)
    return op


def nonlinear_variance(op: FockOperator, spec: NonlinearQuadratureSpec) -> float:
    """var(P + sign*gamma*X^2) under op / Tr[op]"""
    rho = op.normalized().resized(op.dim + _MOMENT_PAD).entries
    x, p = quadrature_matrices(op.dim + _MOMENT_PAD)
    obs = p + spec.sign * spec.gamma * (x @ x)
    mean = np.einsum('ij,ji->', rho, obs).real
    second = np.einsum('ij,ji->', rho, obs @ obs).real
    return float(second - mean ** 2)


def loss_kraus(eta: float, dim: int) -> List[np.ndarray]:
    """Kraus operators K_k = sum_n sqrt(C(n,k) eta^(n-k) (1-eta)^k) |n-k><n|"""
    n = np.arange(dim)
    ops = []
    for k in range(dim):
        kraus = np.zeros((dim, dim))
        src = n[k:]
        log_binom = gammaln(src + 1) - gammaln(k + 1) - gammaln(src - k + 1)
        with np.errstate(divide='ignore'):
            amp = np.exp(0.5 * log_binom) * np.power(eta, 0.5 * (src - k)) * np.power(1.0 - eta, 0.5 * k)
        kraus[src - k, src] = amp
        ops.append(kraus)
    return ops


def apply_loss(op: FockOperator, eta: float, cfg: Optional[FockConfig] = None) -> FockOperator:
    """Pure-loss channel of transmission eta as an exact Kraus sum"""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if cfg is not None and cfg.dim != op.dim:
        raise ValueError(f"operator dim {op.dim} does not match n_max={cfg.n_max}")
    if eta == 1.0:
        return op
    rho = op.entries
    out = np.zeros_like(rho)
    for kraus in loss_kraus(eta, op.dim):
        out += kraus @ rho @ kraus.T
    return FockOperator(out)


def gaussian_covariance(r: float, phi: float):
    """(Vx, Vp, C) of vacuum squeezed by r along direction (cos phi, sin phi)"""
    small, large = 0.5 * np.exp(-2 * r), 0.5 * np.exp(2 * r)
    c, s = np.cos(phi), np.sin(phi)
    vx = small * c ** 2 + large * s ** 2
    vp = small * s ** 2 + large * c ** 2
    cov = (small - large) * c * s
    return vx, vp, cov


def gaussian_nonlinear_variance(r, phi, d, gamma: float, sign: int = 1, dp=0.0):
    """
    var(P + sign*gamma*X^2) of a pure Gaussian state from its raw moments

    Works elementwise on arrays. With vanishing third central moments the
    P displacement cancels and the result is
    Vp + 4 sign gamma d C + 4 gamma^2 d^2 Vx + 2 gamma^2 Vx^2.
    """
    vx, vp, cov = gaussian_covariance(r, phi)
    mean = dp + sign * gamma * (d ** 2 + vx)
    second = (dp ** 2 + vp
              + 2 * sign * gamma * (dp * (d ** 2 + vx) + 2 * d * cov)
              + gamma ** 2 * (d ** 4 + 6 * d ** 2 * vx + 3 * vx ** 2))
    return second - mean ** 2


def gaussian_bound(gamma: float, sign: int = 1, restarts: int = 5, grid_shape=(31, 36, 41)) -> GaussianBound:
    """
    Minimum of var(P + gamma X^2) over pure Gaussian states

    Coarse grid over (r, phi, d) in [0, 3] x [0, pi) x [-5, 5], then
    Nelder-Mead from the best grid points with the P displacement as a
    fourth free parameter. Mixtures cannot go lower, the variance being
    concave in the state.

    Raises:
        OptimizationDidNotConverge: the two best restarts disagree by more than 1e-6
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if gamma == 0:
        logger.info("gamma = 0: P can be squeezed without limit, bound is an infimum")
        return GaussianBound(value=0.0, attained=False)

    rs = np.linspace(0.0, 3.0, grid_shape[0])
    phis = np.linspace(0.0, np.pi, grid_shape[1], endpoint=False)
    ds = np.linspace(-5.0, 5.0, grid_shape[2])
    rr, pp, dd = np.meshgrid(rs, phis, ds, indexing='ij')
    values = gaussian_nonlinear_variance(rr, pp, dd, gamma, sign)
    order = np.argsort(values, axis=None)[:restarts]

    def objective(params):
        r, phi, d, dp = params
        return float(gaussian_nonlinear_variance(abs(r), phi, d, gamma, sign, dp))

    results = []
    for flat in order:
        i, j, k = np.unravel_index(flat, values.shape)
        start = np.array([rs[i], phis[j], ds[k], 0.0])
        res = minimize(objective, start, method='Nelder-Mead',
                       options={'xatol': 1e-10, 'fatol': 1e-14, 'maxiter': 40000, 'maxfev': 80000})
        results.append(res)
        logger.debug(f"Gaussian bound restart from {start.round(3)} -> {res.fun:.10f}")

    results.sort(key=lambda res: res.fun)
    best = results[0]
    if len(results) > 1 and results[1].fun - best.fun > 1e-6:
        raise OptimizationDidNotConverge(
            f"restarts disagree: best {best.fun:.9f}, next {results[1].fun:.9f}"
        )
    r, phi, d, dp = best.x
    logger.info(f"Gaussian bound for gamma={gamma}: {best.fun:.6f}")
    return GaussianBound(value=float(best.fun), attained=True, r=float(abs(r)),
                         phi=float(phi % np.pi), d=float(d), dp=float(dp), restarts=len(results))


def random_gaussian_state(rng: np.random.Generator, cfg: FockConfig, max_r: float = 0.8,
                          max_d: float = 1.5) -> tuple:
    """Random pure Gaussian state and its parameters, for property checks"""
    r = rng.uniform(0.0, max_r)
    phi = rng.uniform(0.0, np.pi)
    dx = rng.uniform(-max_d, max_d)
    dp = rng.uniform(-max_d, max_d)
    return squeezed_state(r, phi, dx, dp, cfg), (r, phi, dx, dp)
