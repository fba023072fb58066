"""
Fock Module
Truncated Fock-space linear algebra: ladder operators, quadratures,
displacement, shear, beamsplitter, anti-unitary conjugation, quadrature
wavefunctions and Wigner functions.

Conventions: hbar = 1, X = (a + a^dag)/sqrt(2), P = (a - a^dag)/(i sqrt(2)),
vacuum variance 1/2. The rotated quadrature is x_theta = X cos(theta) + P sin(theta),
so theta = pi/2 measures P.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import eigh, expm
from scipy.special import eval_genlaguerre, gammaln
from scipy.stats import poisson

from exceptions import FileFormatError, GridTooNarrow, TruncationError

logger = logging.getLogger(__name__)

# Norm that a displaced vacuum may lose above the cutoff
DISPLACEMENT_LEAKAGE = 1e-6
# Allowed unitarity defect on the lower two thirds of the space
UNITARITY_TOLERANCE = 1e-6
# Probability a quadrature grid must capture
GRID_CAPTURE = 0.999


@dataclass(frozen=True)
class FockConfig:
    """Photon-number cutoff of a single mode"""
    n_max: int = 30
    hbar: float = 1.0

    def __post_init__(self):
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        if self.hbar != 1.0:
            raise ValueError("only hbar = 1 is supported")

    @property
    def dim(self) -> int:
        return self.n_max + 1


@dataclass(frozen=True)
class FockOperator:
    """
    Dense operator on a single truncated mode

    Used for density operators, unitaries and POVM elements alike.
    """
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.entries, dtype=complex)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"operator must be square, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, 'entries', arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_ket(cls, ket: np.ndarray) -> 'FockOperator':
        ket = np.asarray(ket, dtype=complex)
        return cls(np.outer(ket, ket.conj()))

    def dag(self) -> 'FockOperator':
        return FockOperator(self.entries.conj().T)

    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def normalized(self) -> 'FockOperator':
        tr = self.trace()
        if tr <= 0:
            raise ValueError("cannot normalize an operator with non-positive trace")
        return FockOperator(self.entries / tr)

    def expect(self, observable: np.ndarray) -> complex:
        """Tr[self @ observable] for an observable of the same dimension"""
        return complex(np.einsum('ij,ji->', self.entries, observable))

    def purity(self) -> float:
        return float(np.einsum('ij,ji->', self.entries, self.entries).real)

    def hermitian_defect(self) -> float:
        return float(np.max(np.abs(self.entries - self.entries.conj().T)))

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.entries + self.entries.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def resized(self, dim: int) -> 'FockOperator':
        """Zero-pad or compress onto the lowest `dim` Fock levels"""
        out = np.zeros((dim, dim), dtype=complex)
        k = min(dim, self.dim)
        out[:k, :k] = self.entries[:k, :k]
        return FockOperator(out)

    def is_density(self, tol: float = 1e-9) -> bool:
        return (self.hermitian_defect() < tol
                and abs(self.trace() - 1.0) < tol
                and self.min_eigenvalue() > -tol)


@dataclass(frozen=True)
class TwoModeState:
    """Density operator on two truncated modes, tensor basis |n1> x |n2>"""
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.entries, dtype=complex)
        d = int(round(np.sqrt(arr.shape[0])))
        if arr.ndim != 2 or arr.shape != (d * d, d * d):
            raise ValueError(f"two-mode state must be (d^2, d^2), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, 'entries', arr)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.entries.shape[0])))

    @classmethod
    def product(cls, first: FockOperator, second: FockOperator) -> 'TwoModeState':
        if first.dim != second.dim:
            raise ValueError(f"mode dimensions differ: {first.dim} vs {second.dim}")
        return cls(np.kron(first.entries, second.entries))

    def tensor(self) -> np.ndarray:
        """View as rho[m1, m2, n1, n2]"""
        d = self.dim
        return self.entries.reshape(d, d, d, d)

    def reduced(self, mode: int) -> FockOperator:
        """Partial trace keeping `mode` (1 or 2)"""
        t = self.tensor()
        if mode == 1:
            return FockOperator(np.einsum('ajbj->ab', t))
        if mode == 2:
            return FockOperator(np.einsum('jajb->ab', t))
        raise ValueError(f"mode must be 1 or 2, got {mode}")

    def trace(self) -> float:
        return float(np.trace(self.entries).real)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=64)
def annihilation(dim: int) -> np.ndarray:
    return _frozen(np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex))


@lru_cache(maxsize=64)
def quadrature_matrices(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (X, P) matrices for a truncated mode"""
    a = annihilation(dim)
    ad = a.conj().T
    x = (a + ad) / np.sqrt(2)
    p = (a - ad) / (1j * np.sqrt(2))
    return _frozen(x), _frozen(p)


def ladder_and_quadratures(cfg: FockConfig) -> Tuple[FockOperator, FockOperator, FockOperator]:
    """
    Annihilation operator and quadratures for the configured cutoff

    Args:
        cfg: Fock cutoff

    Returns:
        (a, X, P); [X, P] = i except on the last diagonal entry
    """
    x, p = quadrature_matrices(cfg.dim)
    return FockOperator(annihilation(cfg.dim)), FockOperator(x), FockOperator(p)


def displacement_matrix(beta: complex, dim: int) -> np.ndarray:
    """
    Fock matrix elements <m|D(beta)|n> of the untruncated displacement

    Uses the closed Laguerre form, so the retained block is exact.
    """
    if beta == 0:
        return np.eye(dim, dtype=complex)
    x = abs(beta) ** 2
    m, n = np.tril_indices(dim)
    log_pref = 0.5 * (gammaln(n + 1) - gammaln(m + 1)) - 0.5 * x
    lower = np.exp(log_pref) * beta ** (m - n) * eval_genlaguerre(n, m - n, x)
    upper = np.exp(log_pref) * (-np.conj(beta)) ** (m - n) * eval_genlaguerre(n, m - n, x)
    out = np.zeros((dim, dim), dtype=complex)
    out[m, n] = lower
    out[n, m] = upper
    return out


def check_displacement(dx: float, dp: float, dim: int):
    mean_photons = 0.5 * (dx ** 2 + dp ** 2)
    leaked = poisson.sf(dim - 1, mean_photons)
    if leaked > DISPLACEMENT_LEAKAGE:
        raise TruncationError(
            f"displacement ({dx:.4g}, {dp:.4g}) leaks {leaked:.3g} of the vacuum norm "
            f"above n_max={dim - 1}"
        )


def displacement(dx: float, dp: float, cfg: FockConfig) -> FockOperator:
    """
    Displacement with D^dag X D = X + dx and D^dag P D = P + dp

    Raises:
        TruncationError: displaced vacuum loses more than 1e-6 of its norm
    """
    check_displacement(dx, dp, cfg.dim)
    return FockOperator(displacement_matrix((dx + 1j * dp) / np.sqrt(2), cfg.dim))


@lru_cache(maxsize=16)
def _x_squared_eigh(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    x, _ = quadrature_matrices(dim)
    evals, evecs = eigh(x @ x)
    return _frozen(evals), _frozen(evecs)


def shear_matrix(k: float, dim: int, pad: Optional[int] = None) -> np.ndarray:
    """exp(i k X^2) built on a padded space by eigendecomposition, cut to `dim`"""
    if k == 0:
        return np.eye(dim, dtype=complex)
    work = dim + (pad if pad is not None else dim + 8)
    evals, evecs = _x_squared_eigh(work)
    full = (evecs * np.exp(1j * k * evals)) @ evecs.conj().T
    return full[:dim, :dim]


def unitarity_defect(u: np.ndarray, block: Optional[int] = None) -> float:
    """Largest deviation of U^dag U from I on the lowest `block` levels (default a quarter of the space)"""
    k = max(1, u.shape[0] // 4) if block is None else int(block)
    gram = u.conj().T @ u
    return float(np.max(np.abs(gram[:k, :k] - np.eye(k))))


def shear(k: float, cfg: FockConfig, block: Optional[int] = None) -> FockOperator:
    """
    Shear P(k) = exp(i k X^2), mapping P -> P + 2kX

    Only the lowest `block` levels (default a quarter of the space) are
    required to stay inside the cutoff; a shear spreads every level upward,
    so the top of a truncated shear is never unitary.

    Raises:
        TruncationError: unitarity defect on the checked block above 1e-6
    """
    u = shear_matrix(k, cfg.dim)
    defect = unitarity_defect(u, block)
    if defect > UNITARITY_TOLERANCE:
        raise TruncationError(f"shear k={k:.4g} has unitarity defect {defect:.3g} at n_max={cfg.n_max}")
    return FockOperator(u)


@lru_cache(maxsize=4)
def beamsplitter_unitary(dim: int, transmittance: float) -> np.ndarray:
    """
    exp(t (a1 a2^dag - a1^dag a2)) with cos^2 t = transmittance

    Coherent inputs map |alpha>|beta> -> |c alpha - s beta>|s alpha + c beta>.
    Every sector with n1 + n2 <= dim - 1 is treated exactly.
    """
    a = annihilation(dim)
    eye = np.eye(dim)
    a1 = np.kron(a, eye)
    a2 = np.kron(eye, a)
    angle = np.arccos(np.sqrt(transmittance))
    gen = a1 @ a2.conj().T - a1.conj().T @ a2
    logger.debug(f"Building beamsplitter unitary dim={dim} T={transmittance}")
    return _frozen(expm(angle * gen))


def beamsplitter(state: TwoModeState, transmittance: float) -> TwoModeState:
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must be in [0, 1], got {transmittance}")
    if transmittance == 1.0:
        return state
    u = beamsplitter_unitary(state.dim, float(transmittance))
    return TwoModeState(u @ state.entries @ u.conj().T)


def anti_unitary_T(state: FockOperator) -> FockOperator:
    """Fock-basis complex conjugation: X -> X, P -> -P"""
    return FockOperator(state.entries.conj())


def hermite_functions(count: int, grid: np.ndarray) -> np.ndarray:
    """
    Normalized Hermite functions psi_0..psi_{count-1} on a grid

    Upward recurrence on the normalized functions keeps every value O(1),
    so there is no overflow for large n.
    """
    grid = np.asarray(grid, dtype=float)
    out = np.zeros((count, grid.size))
    out[0] = np.pi ** -0.25 * np.exp(-0.5 * grid ** 2)
    if count > 1:
        out[1] = np.sqrt(2.0) * grid * out[0]
    for n in range(1, count - 1):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * grid * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def quadrature_kets(dim: int, theta: float, grid: np.ndarray) -> np.ndarray:
    """Columns <n|u; theta> = exp(i theta n) psi_n(u) for every grid point"""
    phases = np.exp(1j * theta * np.arange(dim))
    return phases[:, None] * hermite_functions(dim, grid)


def quadrature_wavefunction(state: FockOperator, theta: float, grid: Iterable[float]) -> np.ndarray:
    """
    Probability density <u; theta|rho|u; theta> on a sorted grid

    Raises:
        GridTooNarrow: the grid captures less than 0.999 of the trace
    """
    grid = np.asarray(grid, dtype=float)
    kets = quadrature_kets(state.dim, theta, grid)
    density = np.einsum('mu,mn,nu->u', kets.conj(), state.entries, kets).real
    captured = trapezoid(density, grid)
    total = state.trace()
    if captured < GRID_CAPTURE * total:
        raise GridTooNarrow(
            f"grid [{grid[0]:.3g}, {grid[-1]:.3g}] captures {captured / total:.5f} of the probability"
        )
    return density


def wigner_grid(op: FockOperator, xs: Iterable[float], ps: Iterable[float]) -> np.ndarray:
    """
    Wigner function W[i, j] = W(xs[i], ps[j]), normalized so that its
    integral over dx dp is Tr[op]
    """
    xs = np.asarray(xs, dtype=float)
    ps = np.asarray(ps, dtype=float)
    rho = 0.5 * (op.entries + op.entries.conj().T)
    alpha = (xs[:, None] + 1j * ps[None, :]) / np.sqrt(2)
    beta = 2 * alpha
    r2 = np.abs(beta) ** 2
    gauss = np.exp(-0.5 * r2)
    w = np.zeros(alpha.shape)
    dim = op.dim
    # W = (1/pi) sum_{m,n} rho_nm (-1)^n <m|D(2 alpha)|n>
    for n in range(dim):
        sign = -1.0 if n % 2 else 1.0
        w += sign * rho[n, n].real * gauss * eval_genlaguerre(n, 0, r2)
        for m in range(n + 1, dim):
            pref = np.exp(0.5 * (gammaln(n + 1) - gammaln(m + 1)))
            lower = pref * beta ** (m - n) * gauss * eval_genlaguerre(n, m - n, r2)
            # rho_nm <m|D|n> + rho_mn <n|D|m>, where <n|D|m> carries (-1)^(m-n) conj(beta)^(m-n)
            w += sign * 2.0 * np.real(rho[n, m] * lower)
    return w / np.pi


def ripple_amplitude(op: FockOperator, disk_radius: float, xs: Iterable[float], ps: Iterable[float]) -> float:
    """Largest |W| of the normalized operator outside a phase-space disk"""
    xs = np.asarray(xs, dtype=float)
    ps = np.asarray(ps, dtype=float)
    w = wigner_grid(op.normalized(), xs, ps)
    outside = (xs[:, None] ** 2 + ps[None, :] ** 2) > disk_radius ** 2
    if not np.any(outside):
        return 0.0
    return float(np.max(np.abs(w[outside])))


def write_wigner_csv(path: Union[str, Path], xs: np.ndarray, ps: np.ndarray, w: np.ndarray):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['x', 'p', 'W'])
        for i, x in enumerate(xs):
            for j, p in enumerate(ps):
                writer.writerow([repr(float(x)), repr(float(p)), repr(float(w[i, j]))])


def operator_to_json(op: FockOperator) -> dict:
    flat = op.entries.reshape(-1)
    return {
        'dim': op.dim,
        'entries': [[float(z.real), float(z.imag)] for z in flat],
    }


def operator_from_json(data: dict) -> FockOperator:
    try:
        dim = int(data['dim'])
        pairs = np.asarray(data['entries'], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"not an operator container: {e}") from e
    if pairs.shape != (dim * dim, 2):
        raise FileFormatError(f"expected {dim * dim} [re, im] pairs, got shape {pairs.shape}")
    return FockOperator((pairs[:, 0] + 1j * pairs[:, 1]).reshape(dim, dim))


def save_operator(op: FockOperator, path: Union[str, Path]):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(operator_to_json(op), f, indent=2)


def load_operator(path: Union[str, Path]) -> FockOperator:
    """
    Load an operator from the JSON container

    Raises:
        FileFormatError: missing file, bad JSON or schema mismatch
    """
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"operator file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"error parsing operator file {path}: {e}") from e
    return operator_from_json(data)


def smeared_weights(outcomes: np.ndarray, grid: np.ndarray, eta: float) -> np.ndarray:
    """
    Loss kernel G(q - sqrt(eta) u) for outcomes q (rows) and ideal values u
    (columns), G being the vacuum noise density of variance (1 - eta)/2
    """
    var = 0.5 * (1.0 - eta)
    diff = np.asarray(outcomes, dtype=float)[:, None] - np.sqrt(eta) * np.asarray(grid, dtype=float)[None, :]
    return np.exp(-0.5 * diff ** 2 / var) / np.sqrt(2 * np.pi * var)


def smeared_projector(q: float, theta: float, eta: float, dim: int, grid: np.ndarray) -> np.ndarray:
    """
    Fock matrix of the integral du G(q - sqrt(eta) u) |u; theta><u; theta|

    At eta = 1 the kernel is a delta and the rank-one projector is returned.
    """
    if eta >= 1.0:
        ket = quadrature_kets(dim, theta, np.array([q]))[:, 0]
        return np.outer(ket, ket.conj())
    kets = quadrature_kets(dim, theta, grid)
    dx = np.diff(grid)
    w = np.zeros(grid.size)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    w = w * smeared_weights(np.array([q]), grid, eta)[0]
    return np.einsum('u,au,bu->ab', w, kets, kets.conj())
