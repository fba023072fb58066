"""
POVM Module
Analytic POVM elements of the feedforward measurement: ideal elements
for an outcome pair (q, y), finite-range elements for an outcome m,
lossy-homodyne elements, the imperfection-dressed model, and detector
states built from them.

For outcome (q, y) with theta = theta(q) and m = sqrt(2) y / cos(theta),
the ideal element is proportional to U T rho_anc T^dag U^dag with
U = P(-tan theta) D(sqrt(2) q, m + 2 gamma q^2). It satisfies
U^dag T^dag (p + gamma x^2) T U = -(p - gamma x^2) + m, which is why its
var(p + gamma x^2) equals the ancilla's var(p - gamma x^2).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from circuit import LossModel, quadrature_grid
from exceptions import QuadratureNotConverged, TruncationError
from fock import (
    FockConfig,
    FockOperator,
    beamsplitter_unitary,
    check_displacement,
    displacement_matrix,
    shear_matrix,
    smeared_projector,
)
from lut import exact_theta
from states import NonlinearQuadratureSpec, nonlinear_variance

logger = logging.getLogger(__name__)

# Levels added while building elements, cropped afterwards
WORK_PAD = 16
VARIANCE_TOLERANCE = 1e-4
# Largest share of the ancilla trace a transformation may push out of the work space
RETAINED_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PovmElement:
    """
    POVM element with its bookkeeping

    `prefactor` is the 2/|cos theta| factor already folded into `operator`;
    `density_weight` turns the operator into a density over its outcome
    variables (1/(2 pi) per dq dy for pair elements, 1 for m and bin elements).
    """
    operator: FockOperator
    label: Tuple = ()
    prefactor: float = 1.0
    density_weight: float = 1.0
    m: Optional[float] = None

    def density(self) -> FockOperator:
        return FockOperator(self.operator.entries * self.density_weight)

    def normalized(self) -> FockOperator:
        return self.operator.normalized()


@dataclass(frozen=True)
class DetectorState:
    operator: FockOperator
    source: Tuple
    variance: float


def _padded(ancilla: FockOperator, dim: int) -> np.ndarray:
    return ancilla.resized(dim).entries


def _element_unitary(q: float, c: float, k: float, work: int) -> np.ndarray:
    check_displacement(np.sqrt(2) * q, c, work - WORK_PAD)
    return shear_matrix(-k, work, pad=work) @ displacement_matrix((np.sqrt(2) * q + 1j * c) / np.sqrt(2), work)


def _transform(u: np.ndarray, rho_t: np.ndarray) -> np.ndarray:
    """
    u rho u^dag for a cropped element unitary

    The crop is a contraction, so any trace lost measures what the shear
    and displacement pushed past the work space for this ancilla.

    Raises:
        TruncationError: more than 1e-6 of the trace is lost
    """
    out = u @ rho_t @ u.conj().T
    before = np.trace(rho_t).real
    lost = 1.0 - np.trace(out).real / before if before > 0 else 0.0
    if lost > RETAINED_TOLERANCE:
        raise TruncationError(f"element transformation loses {lost:.3g} of the ancilla above n_max={u.shape[0] - 1}")
    return out


def povm_pure(q: float, y: float, ancilla: FockOperator, gamma: float, cfg: FockConfig) -> PovmElement:
    """
    Ideal element for the outcome pair (q, y)

    Args:
        q: first homodyne outcome
        y: second homodyne outcome
        ancilla: ancilla density operator
        gamma: nonlinear coupling
        cfg: cutoff of the returned element

    Returns:
        PovmElement carrying (2/|cos theta|) U T rho T^dag U^dag

    Raises:
        TruncationError: the displaced or sheared ancilla does not fit n_max
    """
    theta = float(exact_theta(q, gamma))
    k = np.tan(theta)
    m = np.sqrt(2) * y / np.cos(theta)
    work = cfg.dim + WORK_PAD
    u = _element_unitary(q, m + 2 * gamma * q ** 2, k, work)
    rho_t = _padded(ancilla, work).conj()
    prefactor = 2.0 / abs(np.cos(theta))
    op = prefactor * _transform(u, rho_t)[:cfg.dim, :cfg.dim]
    return PovmElement(FockOperator(op), label=(q, y), prefactor=prefactor,
                       density_weight=1.0 / (2 * np.pi), m=float(m))


def _gauss_nodes(r: float, n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(n_nodes)
    return r * x, r * w


def _povm_m_sum(m: float, rho_t: np.ndarray, gamma: float, r: float, n_nodes: int, dim: int) -> np.ndarray:
    work = rho_t.shape[0]
    total = np.zeros((work, work), dtype=complex)
    for q, w in zip(*_gauss_nodes(r, n_nodes)):
        k = np.sqrt(2) * gamma * q
        u = _element_unitary(q, m + 2 * gamma * q ** 2, k, work)
        # 2/cos(theta) from the element times cos(theta)/sqrt(2) from dy/dm over 2 pi
        total += (w / (np.sqrt(2) * np.pi)) * _transform(u, rho_t)
    return total[:dim, :dim]


def povm_m(m: float, ancilla: FockOperator, gamma: float, q_range: float = 0.6, n_nodes: int = 64,
           cfg: Optional[FockConfig] = None) -> PovmElement:
    """
    Finite-range element for the outcome m, a density over m

    Gauss-Legendre quadrature over q in [-r, r] at y = m cos(theta)/sqrt(2).
    The rule is checked against one with twice the nodes.

    Raises:
        QuadratureNotConverged: normalized variance moves by more than 1e-4
    """
    if q_range <= 0:
        raise ValueError(f"q_range must be positive, got {q_range}")
    if n_nodes < 64:
        raise ValueError(f"n_nodes must be at least 64, got {n_nodes}")
    cfg = cfg or FockConfig(max(ancilla.dim - 1, 30))
    rho_t = _padded(ancilla, cfg.dim + WORK_PAD).conj()
    coarse = FockOperator(_povm_m_sum(m, rho_t, gamma, q_range, n_nodes, cfg.dim))
    fine = FockOperator(_povm_m_sum(m, rho_t, gamma, q_range, 2 * n_nodes, cfg.dim))
    spec = NonlinearQuadratureSpec(gamma, 1)
    change = abs(nonlinear_variance(fine, spec) - nonlinear_variance(coarse, spec))
    if change > VARIANCE_TOLERANCE:
        raise QuadratureNotConverged(f"m={m}: variance changed by {change:.3g} when doubling to {2 * n_nodes} nodes")
    return PovmElement(fine, label=('m', m), m=float(m))


def lossy_homodyne_povm(q: float, theta: float, eta: float, cfg: FockConfig,
                        grid: Optional[np.ndarray] = None) -> PovmElement:
    """
    Gaussian-smeared quadrature projector of a detector with efficiency eta

    The outcome is sqrt(eta) u + vacuum noise, so the element is the
    integral of |u; theta><u; theta| against a Gaussian of variance
    (1 - eta)/2 centered at q/sqrt(eta) in sqrt(eta) u.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if grid is None:
        grid = quadrature_grid(cfg.dim, points=2048)
    op = smeared_projector(q, theta, eta, cfg.dim, grid)
    return PovmElement(FockOperator(op), label=('homodyne', q, theta))


class ImperfectModel:
    """
    Dressed POVM Tr_A[B^dag (Pi_eta1(q|0) x Pi_eta2(y|pi/2 - theta(q))) B rho_A]

    The beamsplitter box has N = n_max + n_anc + 1 levels per mode, which
    holds every |j>|b> with j <= n_max, b <= n_anc exactly.
    """

    def __init__(self, ancilla: FockOperator, loss: LossModel, gamma: float, cfg: FockConfig,
                 grid_points: int = 2048):
        herm = 0.5 * (ancilla.entries + ancilla.entries.conj().T)
        support = np.nonzero(np.max(np.abs(herm), axis=1) > 1e-14)[0]
        self.anc_dim = int(support.max()) + 1 if support.size else 1
        self.rho_a = herm[:self.anc_dim, :self.anc_dim]
        self.cfg = cfg
        self.loss = loss
        self.gamma = gamma
        self.box = cfg.dim + self.anc_dim - 1
        self.grid = quadrature_grid(self.box, points=grid_points)
        u = beamsplitter_unitary(self.box, 0.5)
        cols = []
        for j in range(cfg.dim):
            for b in range(self.anc_dim):
                cols.append(u[:, j * self.box + b])
        # V[a1, a2, (j, b)]
        self.v = np.stack(cols, axis=1).reshape(self.box, self.box, cfg.dim * self.anc_dim)

    def _first(self, q: float) -> np.ndarray:
        return smeared_projector(q, 0.0, self.loss.eta1, self.box, self.grid)

    def element(self, q: float, y: float, first: Optional[np.ndarray] = None) -> np.ndarray:
        """Density over (q, y) of the input-space element"""
        theta = float(exact_theta(q, self.gamma))
        pi1 = first if first is not None else self._first(q)
        pi2 = smeared_projector(y, 0.5 * np.pi - theta, self.loss.eta2, self.box, self.grid)
        t1 = np.einsum('ac,cdK->adK', pi1, self.v)
        t2 = np.einsum('bd,adK->abK', pi2, t1)
        big = np.einsum('abJ,abK->JK', self.v.conj(), t2)
        d, na = self.cfg.dim, self.anc_dim
        big = big.reshape(d, na, d, na)
        return np.einsum('iajb,ba->ij', big, self.rho_a)

    def element_m(self, m: float, q_range: float, n_nodes: int = 64) -> np.ndarray:
        """Density over m, integrated over |q| < q_range"""
        total = np.zeros((self.cfg.dim, self.cfg.dim), dtype=complex)
        for q, w in zip(*_gauss_nodes(q_range, n_nodes)):
            c = np.cos(float(exact_theta(q, self.gamma)))
            total += w * (c / np.sqrt(2)) * self.element(q, m * c / np.sqrt(2))
        return total


def povm_imperfect(q: float, y: float, ancilla: FockOperator, loss: LossModel, gamma: float,
                   cfg: FockConfig) -> PovmElement:
    """
    Element for (q, y) with lossy homodyne detectors, a density over dq dy

    At unit efficiencies this equals the density of povm_pure.
    """
    model = ImperfectModel(ancilla, loss, gamma, cfg)
    theta = float(exact_theta(q, gamma))
    return PovmElement(FockOperator(model.element(q, y)), label=(q, y),
                       m=float(np.sqrt(2) * y / np.cos(theta)))


def povm_imperfect_m(m: float, ancilla: FockOperator, loss: LossModel, gamma: float, cfg: FockConfig,
                     q_range: float = 0.6, n_nodes: int = 64) -> PovmElement:
    model = ImperfectModel(ancilla, loss, gamma, cfg)
    return PovmElement(FockOperator(model.element_m(m, q_range, n_nodes)), label=('m', m), m=float(m))


def displace_p(op: FockOperator, shift: float) -> FockOperator:
    """D_p(shift) op D_p(shift)^dag"""
    d = displacement_matrix(1j * shift / np.sqrt(2), op.dim)
    return FockOperator(d @ op.entries @ d.conj().T)


def averaged_detector_state(elements: Sequence[PovmElement], gamma: float = 0.52) -> DetectorState:
    """Displace each element by -m in p, sum, renormalize"""
    if not elements:
        raise ValueError("need at least one element")
    total = np.zeros_like(elements[0].operator.entries)
    for el in elements:
        total = total + displace_p(el.operator, -(el.m or 0.0)).entries
    op = FockOperator(total).normalized()
    variance = nonlinear_variance(op, NonlinearQuadratureSpec(gamma, 1))
    return DetectorState(op, tuple(el.label for el in elements), variance)


def detector_state(element: PovmElement, gamma: float = 0.52) -> DetectorState:
    op = element.normalized()
    return DetectorState(op, element.label, nonlinear_variance(op, NonlinearQuadratureSpec(gamma, 1)))


def bin_elements(ancilla: FockOperator, gamma: float, edges: np.ndarray, q_window: float,
                 loss: Optional[LossModel] = None, work_cfg: Optional[FockConfig] = None,
                 out_cfg: Optional[FockConfig] = None, m_nodes: int = 4,
                 q_nodes: int = 64) -> List[PovmElement]:
    """
    Theoretical elements integrated over each m-bin plus the complement

    Shifting the input p by s moves every outcome m by sqrt(eta2) s and
    leaves q untouched, so the density over m is D_p(m/sqrt(eta2)) Pi_0
    D_p(...)^dag. Pi_0 is computed once and translated to the Gauss-Legendre
    nodes of each bin. Elements are built at the work cutoff and compressed
    to the output cutoff; the last element is I minus the bins.
    """
    work_cfg = work_cfg or FockConfig(30)
    out_cfg = out_cfg or work_cfg
    pad = work_cfg.dim + WORK_PAD
    lossy = loss is not None and (loss.eta1 < 1.0 or loss.eta2 < 1.0)
    if lossy:
        model = ImperfectModel(ancilla, loss, gamma, FockConfig(pad - 1))
        base = model.element_m(0.0, q_window, q_nodes)
        scale = 1.0 / np.sqrt(loss.eta2)
    else:
        rho_t = _padded(ancilla, pad).conj()
        base = _povm_m_sum(0.0, rho_t, gamma, q_window, q_nodes, pad)
        scale = 1.0
    base_op = FockOperator(base)

    x, w = leggauss(m_nodes)
    elements = []
    for i in range(len(edges) - 1):
        lo, hi = float(edges[i]), float(edges[i + 1])
        half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
        total = np.zeros_like(base)
        for xi, wi in zip(x, w):
            total += half * wi * displace_p(base_op, scale * (mid + half * xi)).entries
        op = FockOperator(total).resized(work_cfg.dim).resized(out_cfg.dim)
        elements.append(PovmElement(op, label=('bin', i), m=mid))
    rest = np.eye(out_cfg.dim) - sum(el.operator.entries for el in elements)
    elements.append(PovmElement(FockOperator(rest), label=('rest',), m=None))
    defect = FockOperator(rest).min_eigenvalue()
    if defect < -1e-8:
        logger.warning(f"Complement element has negative eigenvalue {defect:.3g}")
    logger.info(f"Built {len(elements) - 1} bin elements (lossy={lossy}) at n_max={out_cfg.n_max}")
    return elements


def variance_table(elements: Sequence[PovmElement], gamma: float = 0.52) -> List[Dict]:
    """Rows of (m_bin, variance, trace) for elements with an m label"""
    spec = NonlinearQuadratureSpec(gamma, 1)
    rows = []
    for i, el in enumerate(elements):
        if el.m is None:
            continue
        rows.append({
            'm_bin': i,
            'm': el.m,
            'variance': nonlinear_variance(el.operator, spec),
            'trace': el.operator.trace(),
        })
    return rows
