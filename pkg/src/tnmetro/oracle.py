"""Full-Hilbert-space reference implementations (small N) and closed-form
benchmarks.

Everything here works on dense matrices and serves as ground truth for the
tensor-network modules: the correlated-dephasing channel in closed form, the
symmetric logarithmic derivative (SLD), quantum Fisher information (QFI) and
its double maximization over probe states, the quadratic Bayesian cost hook,
fidelity susceptibility with its quasi-fidelity bounds, thermal states of the
XX chain, and the closed-form asymptotic benchmarks.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import pathlib

import numpy as np

from .channel import DephasingModel
from .tensor import ConvergenceError, StructuralError

log = logging.getLogger("tnmetro.oracle")

MAX_DENSE_QUBITS = 10
MAX_OPTIMIZED_QUBITS = 6


@dataclasses.dataclass
class DenseState:
    """A dense density matrix with its qubit count."""

    matrix: np.ndarray
    n: int

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.shape != (2**self.n, 2**self.n):
            raise StructuralError(
                f"matrix shape {self.matrix.shape} is not 2^{self.n} square"
            )

    @classmethod
    def from_pure(cls, psi: np.ndarray) -> "DenseState":
        psi = np.asarray(psi, dtype=complex).reshape(-1)
        n = int(round(math.log2(psi.size)))
        if 2**n != psi.size:
            raise StructuralError(f"vector length {psi.size} is not a power of 2")
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), n)

    def validate(self, atol: float = 1e-10) -> "DenseState":
        m = self.matrix
        if np.linalg.norm(m - m.conj().T) > 1e-12 * max(1.0, np.linalg.norm(m)):
            raise StructuralError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1) > atol:
            raise StructuralError(f"trace {np.trace(m)} differs from 1")
        if np.linalg.eigvalsh(m).min() < -1e-10:
            raise StructuralError("density matrix has a negative eigenvalue")
        return self


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, DenseState):
        return x.matrix
    return np.asarray(x, dtype=complex)


def _config_energies(n: int, eigenvalues=(0.5, -0.5)) -> np.ndarray:
    """E[j] = per-configuration vector of local eigenvalues, shape (d^N, N)."""
    d = len(eigenvalues)
    e = np.asarray(eigenvalues, dtype=float)
    idx = np.indices([d] * n).reshape(n, -1).T  # (d^N, N) of local labels
    return e[idx]


def _damping_matrix(model: DephasingModel, n: int, boundary: str) -> np.ndarray:
    """Elementwise damping exp(−½ ξᵀCξ) on (row, col) configuration pairs."""
    c = model.correlation_matrix(n, boundary)
    ee = _config_energies(n, model.generator.eigenvalues)  # (d^N, N)
    q = np.einsum("ai,ij,aj->a", ee, c, ee)
    cross = ee @ c @ ee.T
    return np.exp(-0.5 * q[:, None] - 0.5 * q[None, :] + cross)


def exact_channel(
    rho0, model: DephasingModel, phi: float = 0.0, boundary: str = "pbc"
) -> DenseState:
    """Closed-form dephasing channel: ⟨j|ρ|k⟩ ← ⟨j|ρ₀|k⟩·e^{−½ξᵀCξ}·e^{−iφΣξ}.

    ξ_n = ε_{j_n} − ε_{k_n}; C is the (cyclic-)tridiagonal correlation matrix.
    """
    m = _as_matrix(rho0)
    n = rho0.n if isinstance(rho0, DenseState) else int(round(math.log2(m.shape[0])))
    if n > MAX_DENSE_QUBITS:
        raise StructuralError(f"dense channel limited to {MAX_DENSE_QUBITS} qubits")
    damp = _damping_matrix(model, n, boundary)
    esum = _config_energies(n, model.generator.eigenvalues).sum(axis=1)
    phase = np.exp(-1j * phi * (esum[:, None] - esum[None, :]))
    return DenseState(m * damp * phase, n)


def dephasing_derivative(rho, eigenvalues=(0.5, -0.5)) -> np.ndarray:
    """dρ_φ/dφ = i[ρ_φ, H] for the diagonal generator H = Σ_n h^[n]."""
    m = _as_matrix(rho)
    n = int(round(math.log2(m.shape[0])))
    esum = _config_energies(n, eigenvalues).sum(axis=1)
    return 1j * m * (esum[None, :] - esum[:, None])


def exact_sld(rho, rho_prime, support_cutoff: float = 1e-12) -> np.ndarray:
    """Symmetric logarithmic derivative L = Σ 2⟨λ_j|ρ'|λ_k⟩/(λ_j+λ_k)|λ_j⟩⟨λ_k|.

    Terms with λ_j + λ_k < support_cutoff are dropped (pseudo-inverse
    convention on the kernel)."""
    r = _as_matrix(rho)
    rp = _as_matrix(rho_prime)
    w, v = np.linalg.eigh((r + r.conj().T) / 2)
    rp_eig = v.conj().T @ rp @ v
    denom = w[:, None] + w[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(denom >= support_cutoff, 2.0 / np.where(denom == 0, 1, denom), 0.0)
    l_eig = coeff * rp_eig
    l = v @ l_eig @ v.conj().T
    return (l + l.conj().T) / 2


def sld_residual(rho, rho_prime, l) -> float:
    """‖ρ' − ½(Lρ + ρL)‖_F — zero on the support when L solves the SLD equation."""
    r, rp = _as_matrix(rho), _as_matrix(rho_prime)
    return float(np.linalg.norm(rp - 0.5 * (l @ r + r @ l)))


def fom_value(rho, rho_prime, l) -> float:
    """Figure of merit 2Tr(ρ'L) − Tr(ρL²) for a candidate Hermitian L."""
    r, rp = _as_matrix(rho), _as_matrix(rho_prime)
    return float(2 * np.trace(rp @ l).real - np.trace(r @ l @ l).real)


def exact_qfi(rho, rho_prime) -> float:
    """QFI as the maximized figure of merit sup_L [2Tr(ρ'L) − Tr(ρL²)]."""
    l = exact_sld(rho, rho_prime)
    return fom_value(rho, rho_prime, l)


def exact_optimal_qfi(
    model: DephasingModel,
    n: int,
    boundary: str = "pbc",
    tol: float = 1e-8,
    max_iters: int = 2000,
    allow_large: bool = False,
):
    """Double maximization of the QFI over probe states for the dephasing model.

    Alternates the dense SLD solve with the top eigenvector of the dual-channel
    image of 2i[H, L] − L² until the figure of merit is stationary within
    ``tol``. Returns ``(qfi, probe_state_vector)``.
    """
    limit = MAX_DENSE_QUBITS if allow_large else MAX_OPTIMIZED_QUBITS
    if n > limit:
        raise StructuralError(f"optimized dense oracle limited to {limit} qubits")
    eigenvalues = model.generator.eigenvalues
    damp = _damping_matrix(model, n, boundary)
    esum = _config_energies(n, eigenvalues).sum(axis=1)
    ediff = esum[None, :] - esum[:, None]  # (E_k − E_j) on (j, k)

    dim = 2**n
    psi = np.ones(dim) / math.sqrt(dim)
    fom_prev = -np.inf
    fom = 0.0
    for _ in range(max_iters):
        rho = damp * np.outer(psi, psi.conj())
        rho_prime = 1j * rho * ediff
        l = exact_sld(rho, rho_prime)
        # state step: maximize ⟨ψ| Λ*(2i[H,L] − L²) |ψ⟩; Λ is self-dual here
        h_comm = 1j * (-ediff) * l  # i[H, L] elementwise for diagonal H
        m_eff = damp * (2 * h_comm - l @ l)
        m_eff = (m_eff + m_eff.conj().T) / 2
        w, v = np.linalg.eigh(m_eff)
        psi = v[:, -1]
        fom = float(w[-1])
        if abs(fom - fom_prev) <= tol * max(1.0, abs(fom)):
            return fom, psi
        fom_prev = fom
    raise ConvergenceError(
        f"dense double maximization not stationary after {max_iters} iterations",
        residual=abs(fom - fom_prev),
    )


def exact_bayesian_cost(rho_bar, rho_bar_prime, prior_variance: float) -> float:
    """Minimal quadratic Bayesian cost Δ₀² − sup_L[2Tr(ρ̄'L) − Tr(ρ̄L²)]."""
    l = exact_sld(rho_bar, rho_bar_prime)
    return prior_variance - fom_value(rho_bar, rho_bar_prime, l)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


@dataclasses.dataclass
class FidelitySusceptibility:
    """χ from the ε-difference QFI and its quasi-fidelity bound partner χ̃.

    The exact susceptibility obeys χ̃ ≤ χ ≤ 2χ̃. ``eps_regime_flagged`` is
    True when the χ estimate moved by more than 5% between ε and ε/2 (only
    checked when the half-step state was supplied), signalling that ε is too
    large for the quadratic regime.
    """

    chi: float
    chi_tilde: float
    eps_regime_flagged: bool | None = None

    def __iter__(self):
        return iter((self.chi, self.chi_tilde))


def exact_fidelity_susceptibility(
    rho_phi, rho_phi_eps, eps: float, rho_phi_half_eps=None
) -> FidelitySusceptibility:
    """Fidelity susceptibility χ = QFI/4 via the ε-difference derivative, and
    the quasi-fidelity bound χ̃ = 2(1 − √(Tr √ρ_φ √ρ_{φ+ε}))/ε²."""
    if eps <= 0:
        raise StructuralError("eps must be positive")
    r = _as_matrix(rho_phi)
    re = _as_matrix(rho_phi_eps)
    chi = exact_qfi(r, (re - r) / eps) / 4.0
    quasi = np.sqrt(max(np.trace(_psd_sqrt(r) @ _psd_sqrt(re)).real, 0.0))
    chi_tilde = 2.0 * (1.0 - quasi) / eps**2
    band_slack = 1e-6
    if chi_tilde > chi + band_slack or chi > 2 * chi_tilde + band_slack:
        log.warning(
            "susceptibility band chi_tilde <= chi <= 2*chi_tilde violated "
            "(chi=%.6g, chi_tilde=%.6g); eps=%g is likely outside the "
            "quadratic regime",
            chi,
            chi_tilde,
            eps,
        )
    flagged = None
    if rho_phi_half_eps is not None:
        rh = _as_matrix(rho_phi_half_eps)
        chi_half = exact_qfi(r, (rh - r) / (eps / 2)) / 4.0
        scale = max(abs(chi), abs(chi_half), 1e-300)
        flagged = abs(chi - chi_half) / scale > 0.05
        if flagged:
            log.warning(
                "fidelity susceptibility moved %.3g%% between eps and eps/2; "
                "eps=%g is outside the quadratic regime",
                100 * abs(chi - chi_half) / scale,
                eps,
            )
    return FidelitySusceptibility(chi=chi, chi_tilde=chi_tilde, eps_regime_flagged=flagged)


_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)


def _kron_chain(ops) -> np.ndarray:
    out = np.array([[1.0]], dtype=complex)
    for o in ops:
        out = np.kron(out, o)
    return out


def xx_hamiltonian(n: int, phi: float) -> np.ndarray:
    """H = −Σ_{n<N}(σx σx + σy σy) + φ Σ σx on an open chain."""
    dim = 2**n
    h = np.zeros((dim, dim), dtype=complex)
    eye = np.eye(2)
    for i in range(n - 1):
        for pauli in (_SX, _SY):
            ops = [eye] * n
            ops[i] = pauli
            ops[i + 1] = pauli
            h -= _kron_chain(ops)
    for i in range(n):
        ops = [eye] * n
        ops[i] = _SX
        h += phi * _kron_chain(ops)
    return h


def xx_thermal_state(n: int, beta: float, phi: float = 0.0) -> DenseState:
    """Thermal state e^{−βH}/Z of the open XX chain, ground-energy shifted."""
    if n > MAX_DENSE_QUBITS:
        raise StructuralError(f"dense thermal oracle limited to {MAX_DENSE_QUBITS} qubits")
    if beta < 0:
        raise StructuralError("beta must be nonnegative")
    h = xx_hamiltonian(n, phi)
    w, v = np.linalg.eigh(h)
    weights = np.exp(-beta * (w - w[0]))  # shift avoids overflow for large beta
    weights /= weights.sum()
    return DenseState((v * weights) @ v.conj().T, n)


def load_fixture(path) -> dict:
    """Parse a ``key = value`` golden-fixture file.

    Lines starting with ``#`` and blank lines are ignored; values parse as
    float when possible and stay strings otherwise."""
    out: dict = {}
    for line in pathlib.Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise StructuralError(f"fixture line without '=': {line!r}")
        key, value = key.strip(), value.strip()
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out


class BenchmarkFormulas:
    """Closed-form asymptotic benchmarks for the correlated dephasing model."""

    @staticmethod
    def eta(c1: float) -> float:
        """Single-site coherence retention e^{−c1/2}."""
        return math.exp(-c1 / 2)

    @staticmethod
    def qfi_local_per_particle(c1: float) -> float:
        """Asymptotic QFI per particle for uncorrelated dephasing: η²/(1−η²)."""
        eta2 = math.exp(-c1)
        return eta2 / (1.0 - eta2)

    @staticmethod
    def qfi_optimal_per_particle(c1: float, c2: float = 0.0) -> float:
        """Asymptotic optimal QFI per particle with neighbour correlation c2."""
        e = math.exp(-c1)
        return e / (1.0 - e + 2.0 * e * math.sinh(c2))

    @staticmethod
    def qfi_product_per_particle(c1: float, c2: float = 0.0) -> float:
        """Asymptotic QFI per particle for product (unentangled) probes."""
        e = math.exp(-c1)
        return e / (1.0 + 2.0 * e * math.sinh(c2))

    @staticmethod
    def field_uncertainty_fixed_t(sigma2, chi, g, t, n) -> float:
        """ΔB̃_t for a single interrogation of duration t."""
        c1 = sigma2 * g**2 * t
        c2 = chi * g**2 * t
        f_per_n = BenchmarkFormulas.qfi_optimal_per_particle(c1, c2)
        return math.sqrt(1.0 / (n * f_per_n)) / (g * t)

    @staticmethod
    def field_uncertainty_total_time(sigma2, chi, g, t, total_time, n) -> float:
        """ΔB̃_T after repeating t-long interrogations for total time T."""
        return BenchmarkFormulas.field_uncertainty_fixed_t(sigma2, chi, g, t, n) / math.sqrt(
            total_time / t
        )

    @staticmethod
    def field_uncertainty_optimal(sigma2, chi, total_time, n) -> float:
        """Optimal-interrogation limit ΔB̃ = sqrt((σ² + 2χ)/(T·N))."""
        return math.sqrt((sigma2 + 2 * chi) / (total_time * n))

    @staticmethod
    def field_uncertainty_optimal_ranged(sigma2, chis, total_time, n) -> float:
        """Generalized optimal limit with correlations χ_2..χ_r:
        ΔB̃ = sqrt((σ² + 2Σχ_k)/(T·N))."""
        return math.sqrt((sigma2 + 2 * float(np.sum(chis))) / (total_time * n))

    @staticmethod
    def spin_squeezing(var_jy: float, mean_jx: float) -> float:
        """Squeezing parameter ξ² = 2·Δ²J_y/⟨J_x⟩ (1 for a coherent spin state)."""
        return 2.0 * var_jy / mean_jx
