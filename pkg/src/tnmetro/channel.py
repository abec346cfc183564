"""Noisy parameter-encoding channels as commuting superoperator gate layers.

The shipped model is nearest-neighbour correlated dephasing: each site
acquires local dephasing of strength ``c1`` and each neighbouring pair a
correlated factor of strength ``c2``. All gates are diagonal in the doubled
eigenbasis of the local generator, so the layers commute exactly and the
channel factorizes into an MPO of small bond dimension.

Doubled-index convention: a density-matrix element ⟨j|ρ|k⟩ maps to the
vectorized component x = j·d + k. Superoperator gates are matrices on x.

The channel MPO applied to a vectorized ρ₀ produces ρ_φ with bond dimension
D_ρ = D_ρ₀ · D⁽²⁾, where D⁽²⁾ is the split rank of the two-site gate.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .networks import MPO, MPS, devectorize, mpo_apply, vectorize
from .tensor import StructuralError, Tensor, svd_truncate


@dataclasses.dataclass(frozen=True)
class LocalGenerator:
    """Single-site Hamiltonian h in its eigenbasis: h = Σ_j ε_j |j⟩⟨j|."""

    phys_dim: int
    eigenvalues: tuple[float, ...]

    def __post_init__(self):
        if len(self.eigenvalues) != self.phys_dim:
            raise StructuralError(
                f"{len(self.eigenvalues)} eigenvalues for phys_dim {self.phys_dim}"
            )

    @classmethod
    def spin(cls, s: float = 0.5) -> "LocalGenerator":
        """Spin-s generator: ε = (s, s-1, ..., -s); spin-½ gives (+½, -½)."""
        d = round(2 * s + 1)
        if abs(2 * s + 1 - d) > 1e-12 or d < 2:
            raise StructuralError(f"invalid spin {s}")
        return cls(d, tuple(s - j for j in range(d)))

    @property
    def xi(self) -> np.ndarray:
        """ξ[x=(j,k)] = ε_j − ε_k on the doubled index, length d²."""
        e = np.asarray(self.eigenvalues, dtype=float)
        return (e[:, None] - e[None, :]).reshape(-1)

    def dense_hamiltonian(self, n: int) -> np.ndarray:
        """Σ_n h^[n] as a dense diagonal matrix on n sites."""
        e = np.asarray(self.eigenvalues, dtype=float)
        total = np.zeros(self.phys_dim**n)
        for site in range(n):
            shape = [1] * n
            shape[site] = self.phys_dim
            total = total + np.broadcast_to(
                e.reshape(shape), [self.phys_dim] * n
            ).reshape(-1)
        return np.diag(total)


@dataclasses.dataclass(frozen=True)
class DephasingModel:
    """Locally correlated dephasing: strength c1 per site, c2 per neighbour pair.

    ``c1 = σ²g²t`` and ``c2 = χg²t`` when the raw noise-field parameters
    (variance σ², neighbour covariance χ, coupling g, time t) are supplied;
    the underlying rates are then γ1 = (σ²−2|χ|)g² and γ2 = χg².
    """

    c1: float
    c2: float = 0.0
    spin: float = 0.5
    sigma2: float | None = None
    chi: float | None = None
    g: float | None = None
    t: float | None = None

    def __post_init__(self):
        if self.c1 < 0:
            raise StructuralError("c1 must be nonnegative")
        if abs(self.c2) > self.c1 / 2 + 1e-12:
            raise StructuralError(
                f"|c2|={abs(self.c2)} exceeds c1/2={self.c1 / 2}: the noise "
                "correlation matrix would not be positive semidefinite"
            )

    @property
    def generator(self) -> LocalGenerator:
        return LocalGenerator.spin(self.spin)

    @property
    def phys_dim(self) -> int:
        return self.generator.phys_dim

    @property
    def gamma1(self) -> float | None:
        if self.sigma2 is None or self.chi is None or self.g is None:
            return None
        return (self.sigma2 - 2 * abs(self.chi)) * self.g**2

    @property
    def gamma2(self) -> float | None:
        if self.chi is None or self.g is None:
            return None
        return self.chi * self.g**2

    def correlation_matrix(self, n: int, boundary: str = "pbc") -> np.ndarray:
        """The N×N noise correlation matrix C (diagonal c1, neighbours c2).

        Built from the link sum, so the N=2 ring picks up both links between
        the two sites (off-diagonal 2·c2)."""
        c = self.c1 * np.eye(n)
        links = range(n) if boundary == "pbc" else range(n - 1)
        for i in links:
            j = (i + 1) % n
            c[i, j] += self.c2
            c[j, i] += self.c2
        return c


@dataclasses.dataclass(frozen=True)
class NoiseGateSet:
    """The channel's commuting gate layers in the doubled eigenbasis.

    ``y``: single-site superoperator (d²×d²). ``x_full``: two-site
    superoperator as a 4-leg tensor (x1_out, x2_out, x1_in, x2_in).
    ``t_gate``/``w_gate``: its SVD split X = T·W with rank ``d2_rank``
    (T on the left site, legs (x_out, x_in, bond); W on the right site,
    legs (bond, x_out, x_in)). ``z(phi)`` builds the diagonal phase gate.
    ``corr_range``: correlation range (2 = nearest neighbour).
    """

    generator: LocalGenerator
    y: np.ndarray
    x_full: np.ndarray
    t_gate: np.ndarray
    w_gate: np.ndarray
    d2_rank: int
    corr_range: int = 2

    def z(self, phi: float) -> np.ndarray:
        """Phase-encoding superoperator e^{−ihφ} ⊗ (e^{ihφ})ᵀ, diagonal."""
        return np.diag(np.exp(-1j * self.generator.xi * phi))

    @property
    def phys_dim(self) -> int:
        return self.generator.phys_dim


def split_two_site_gate(x, rel_cutoff: float = 1e-12):
    """SVD-split a two-site superoperator into (T, W, D2).

    ``x`` has legs (x1_out, x2_out, x1_in, x2_in), each of dim d². The split
    groups site-1 legs against site-2 legs; T = U·√S carries (x_out, x_in,
    bond) and W = √S·V† carries (bond, x_out, x_in); D2 is the kept rank.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=complex)
    t = Tensor(x, ("a1", "a2", "b1", "b2"))
    res = svd_truncate(t, ["a1", "b1"], ["a2", "b2"], rel_cutoff=rel_cutoff)
    d2 = len(res.s)
    sq = np.sqrt(res.s)
    t_gate = res.u.data * sq  # (a1, b1, bond)
    w_gate = sq[:, None, None] * res.vdag.data  # (bond, a2, b2)
    return t_gate, w_gate, d2


def build_dephasing_gates(model: DephasingModel, rel_cutoff: float = 1e-12) -> NoiseGateSet:
    """Gate set for the correlated dephasing channel.

    Y = exp(−(c1/2)·Υ) with Υ = (h⊗1 − 1⊗h)² and X = exp(−c2·Ξ) with
    Ξ = (h⊗1 − 1⊗h) ⊗ (h⊗1 − 1⊗h); both diagonal, hence exactly commuting.
    Applied to a dense ρ₀ the full set reproduces the cumulant formula
    ⟨j|ρ|k⟩ → ⟨j|ρ|k⟩·exp(−½ ξᵀC ξ) with ξ_n = ε_{j_n} − ε_{k_n}.
    """
    gen = model.generator
    xi = gen.xi
    y = np.diag(np.exp(-0.5 * model.c1 * xi**2))
    dd = len(xi)
    xdiag = np.exp(-model.c2 * np.outer(xi, xi))
    x_full = np.zeros((dd, dd, dd, dd), dtype=complex)
    idx = np.arange(dd)
    x_full[idx[:, None], idx[None, :], idx[:, None], idx[None, :]] = xdiag
    t_gate, w_gate, d2 = split_two_site_gate(x_full, rel_cutoff=rel_cutoff)
    return NoiseGateSet(
        generator=gen, y=y, x_full=x_full, t_gate=t_gate, w_gate=w_gate, d2_rank=d2
    )


def channel_mpo(
    gates: NoiseGateSet,
    n: int,
    boundary: str = "pbc",
    phi: float = 0.0,
    dual: bool = False,
) -> MPO:
    """The channel Λ_φ as a superoperator MPO on the doubled physical index.

    Site tensor: C[γL, γR, x, x'] composing W (left link), Y, Z(φ), T (right
    link). OBC drops the wraparound X gate: the first site emits only T and
    the last receives only W. n=1 chains have no neighbour pairs at all.

    ``dual=True`` returns the bilinear dual Λ*_φ (conjugate + swapped
    physical legs), satisfying Tr(Λ_φ(ρ)·M) = Tr(ρ·Λ*_φ(M)).
    """
    dd = gates.phys_dim**2
    local = gates.y @ gates.z(phi)  # diagonal product, order irrelevant
    arrays = []
    for i in range(n):
        has_w = boundary in ("pbc", "ti") or i > 0
        has_t = boundary in ("pbc", "ti") or i < n - 1
        if n == 1 and boundary != "ti":
            # a single finite site has no neighbour pairs
            has_w = has_t = False
        w = gates.w_gate if has_w else np.eye(dd)[None, :, :]
        t = gates.t_gate if has_t else np.eye(dd)[:, :, None]
        # compose out ← T ∘ (Y·Z) ∘ W ← in; legs (γL, γR, x_out, x_in)
        site = np.einsum("auG,uv,gvb->gGab", t, local, w)
        arrays.append(site)
    mpo = MPO(arrays, "ti" if boundary == "ti" else boundary)
    if dual:
        mpo = mpo.conj().transpose_phys()
    return mpo


def apply_channel(rho0, gates: NoiseGateSet, phi: float = 0.0) -> MPO:
    """ρ_φ = Λ_φ(ρ₀) as an MPO; accepts ρ₀ as MPO or vectorized MPS.

    Output bond dimension is D_ρ₀·D⁽²⁾ on every link carrying an X gate.
    """
    if isinstance(rho0, MPS):
        psi = rho0
    elif isinstance(rho0, MPO):
        psi = vectorize(rho0)
    else:
        raise StructuralError("rho0 must be an MPO or a vectorized MPS")
    ch = channel_mpo(gates, psi.n_sites, psi.boundary, phi)
    return devectorize(mpo_apply(ch, psi))


def apply_dual_channel(op: MPO, gates: NoiseGateSet, phi: float = 0.0) -> MPO:
    """Λ*_φ(M): the bilinear dual channel applied to an operator MPO."""
    psi = vectorize(op)
    ch = channel_mpo(gates, psi.n_sites, psi.boundary, phi, dual=True)
    return devectorize(mpo_apply(ch, psi))


def build_rho_prime_mpo(
    rho_phi: MPO, gen: LocalGenerator, scalar: complex = 1j, eigenbasis: bool = True
) -> MPO:
    """MPO of scalar·[ρ_φ, H] with H = Σ_n h^[n], via the 2×2 block trick.

    With the default scalar=i this is ρ'_φ = dρ_φ/dφ = i[ρ_φ, H]. Every link
    dimension doubles. ``rho_phi`` must be expressed in the generator
    eigenbasis (set ``eigenbasis`` accordingly; False is rejected).
    """
    if not eigenbasis:
        raise StructuralError(
            "the commutator construction requires the generator eigenbasis"
        )
    e = np.asarray(gen.eigenvalues, dtype=float)
    if rho_phi.phys_dim != gen.phys_dim:
        raise StructuralError("generator and operator physical dims differ")
    # factor[j, k] multiplies ⟨j|ρ|k⟩: scalar·(ε_k − ε_j) telescopes the sum
    fac = scalar * (e[None, :] - e[:, None])
    n = rho_phi.n_sites
    arrays = []
    for i, a in enumerate(rho_phi.arrays):
        dl, dr, d, _ = a.shape
        if rho_phi.boundary == "obc":
            first, last = i == 0, i == n - 1
            if n == 1:
                block = fac[None, None]  # 1×1 bond: plain elementwise factor
            elif first:
                block = np.stack([fac, np.ones_like(fac)])[None]  # (1,2,d,d)
            elif last:
                block = np.stack([np.ones_like(fac), fac])[:, None]  # (2,1,d,d)
            else:
                zero = np.zeros_like(fac)
                one = np.ones_like(fac)
                block = np.array([[one, zero], [fac, one]])  # (2,2,d,d)
        else:
            zero = np.zeros_like(fac)
            one = np.ones_like(fac)
            if i == 0:
                block = np.array([[fac, one], [zero, zero]])
            elif i == n - 1:
                block = np.array([[one, zero], [fac, zero]])
            else:
                block = np.array([[one, zero], [fac, one]])
        bl, br = block.shape[:2]
        site = np.einsum("uvjk,LRjk->uLvRjk", block, a).reshape(bl * dl, br * dr, d, d)
        arrays.append(site)
    return MPO(arrays, rho_phi.boundary)


@dataclasses.dataclass(frozen=True)
class DerivativeHandle:
    """The derivative (ρ_{φ+ε} − ρ_φ)/ε kept as a pair of networks.

    Downstream consumers that can work with the pair (transfer-spectrum
    methods) should; :meth:`to_mpo` forms the explicit difference for finite
    chains.
    """

    rho_plus: MPO
    rho: MPO
    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise StructuralError("eps must be positive")
        if (
            self.rho_plus.n_sites != self.rho.n_sites
            or self.rho_plus.phys_dim != self.rho.phys_dim
            or self.rho_plus.boundary != self.rho.boundary
        ):
            raise StructuralError("shifted and unshifted networks must match in shape")

    def to_mpo(self) -> MPO:
        from .networks import mpo_add

        return mpo_add(self.rho_plus, self.rho, 1.0 / self.eps, -1.0 / self.eps)


def difference_derivative(rho_plus: MPO, rho: MPO, eps: float) -> DerivativeHandle:
    """Package ρ_{φ+ε} and ρ_φ as a discrete-derivative handle."""
    return DerivativeHandle(rho_plus=rho_plus, rho=rho, eps=eps)
