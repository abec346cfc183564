"""Finite-chain alternating maximization of the quantum Fisher information.

The figure of merit FoM(ψ, L) = 2·Tr(ρ'L) − Tr(ρL²) — with ρ the channel
output for probe |ψ⟩ and L a Hermitian trial observable — is maximized by
alternating two tensor-network sweeps:

* the SLD sweep updates one L site at a time by solving the regularized
  linear stationarity equation of the locally quadratic FoM;
* the state sweep updates one |ψ⟩ site at a time by the top eigenvector of
  the dual-channel image of 2i[H,L] − L², a standard eigenproblem in the
  open-boundary canonical gauge.

Bond dimensions escalate on a schedule until the result stops moving.

All trace networks are contracted by folding site tensors into skinny
boundary environments (legs × wraparound-bond), never materializing full
transfer matrices, so memory stays linear in the chain length.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Sequence

import numpy as np

from .channel import (
    DephasingModel,
    DerivativeHandle,
    NoiseGateSet,
    apply_channel,
    apply_dual_channel,
    build_dephasing_gates,
    build_rho_prime_mpo,
)
from .networks import (
    MPO,
    MPS,
    entropy_profile,
    mpo_add,
    mpo_multiply,
    mpo_trace,
    network_to_text,
)
from .tensor import ConvergenceError, StructuralError

log = logging.getLogger("tnmetro.finite")

HERMITIAN_GAUGE_TOL = 1e-8

# numpy's optimize=True caps intermediates at the largest operand size; for the
# skinny environments used here that forbids every pairwise contraction and
# einsum silently degrades to an all-at-once index loop.  A generous explicit
# memory limit (in elements) restores the pairwise BLAS path.
EINSUM_OPT = ("greedy", 1 << 26)


def _phys_swap_conj(a: np.ndarray) -> np.ndarray:
    """Adjoint in the physical legs, bond legs untouched: A[l,r,j,k] → conj(A[l,r,k,j])."""
    return a.conj().transpose(0, 1, 3, 2)


class SldMpo:
    """A trial observable L as an MPO whose site tensors are self-adjoint in
    their physical legs (the "Hermitian gauge"), so dense(L) is Hermitian by
    construction."""

    def __init__(self, mpo: MPO, hermitian_gauge: bool = True):
        self.mpo = mpo
        self.hermitian_gauge = hermitian_gauge

    @property
    def arrays(self) -> list[np.ndarray]:
        return self.mpo.arrays

    @property
    def n_sites(self) -> int:
        return self.mpo.n_sites

    @property
    def d_l(self) -> int:
        return max(self.mpo.bond_dims)

    def gauge_residual(self) -> float:
        """max over sites of ‖S − S‡‖/‖S‖ for the physical-leg adjoint."""
        worst = 0.0
        for a in self.mpo.arrays:
            scale = max(np.linalg.norm(a), 1e-300)
            worst = max(worst, np.linalg.norm(a - _phys_swap_conj(a)) / scale)
        return worst

    def check_gauge(self, tol: float = HERMITIAN_GAUGE_TOL) -> None:
        res = self.gauge_residual()
        if res > tol:
            raise StructuralError(
                f"SLD sites violate the Hermitian gauge by {res:.3g} (tol {tol:g})"
            )

    def copy(self) -> "SldMpo":
        return SldMpo(self.mpo.copy(), self.hermitian_gauge)

    def __repr__(self) -> str:
        return f"SldMpo(n={self.n_sites}, d_l={self.d_l})"


@dataclasses.dataclass
class FomProblem:
    """One figure-of-merit instance: the encoded state, its φ-derivative, the
    local generator, and the mode.

    ``qfi`` mode requires trace-one ``rho``; ``bayesian`` mode accepts a
    prior-averaged pair (ρ̄, ρ̄') supplied by the caller and reuses the same
    machinery unchanged.
    """

    rho: MPO
    rho_prime: MPO | DerivativeHandle
    generator: object
    mode: str = "qfi"

    def __post_init__(self):
        if self.mode not in ("qfi", "bayesian"):
            raise StructuralError(f"unknown mode {self.mode!r}")
        if self.mode == "qfi":
            tr = mpo_trace(self.rho)
            if abs(tr - 1.0) > 1e-8:
                raise StructuralError(
                    f"encoded state has trace {tr:.10g}; expected 1 in qfi mode"
                )

    def derivative_mpo(self) -> MPO:
        if isinstance(self.rho_prime, DerivativeHandle):
            return self.rho_prime.to_mpo()
        return self.rho_prime


@dataclasses.dataclass
class OptimizationConfig:
    """Knobs of the alternating optimization.

    ``kappa``: relative pseudo-inverse cutoff for the SLD linear solves.
    ``eps``: finite-difference step used by callers that build ε-difference
    derivatives. ``rel_tol``: relative figure-of-merit change that counts as
    converged. ``d_psi_schedule``/``d_l_schedule``: nondecreasing
    bond-dimension ladders for the state and the observable. ``stage_tol``:
    relative figure-of-merit change between consecutive ladder stages below
    which the escalation stops early.
    """

    kappa: float = 1e-10
    eps: float = 1e-3
    max_outer_iters: int = 40
    rel_tol: float = 1e-3
    stage_tol: float = 0.01
    d_psi_schedule: Sequence[int] = (2, 4, 8)
    d_l_schedule: Sequence[int] = (2, 4)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise StructuralError("kappa must lie in (0, 1)")
        if self.rel_tol <= 0:
            raise StructuralError("rel_tol must be positive")
        if not 0 < self.stage_tol <= 1:
            raise StructuralError("stage_tol must lie in (0, 1]")
        if self.eps <= 0:
            raise StructuralError("eps must be positive")
        if self.max_outer_iters < 1:
            raise StructuralError("max_outer_iters must be at least 1")
        for name in ("d_psi_schedule", "d_l_schedule"):
            sched = list(getattr(self, name))
            if not sched:
                raise StructuralError(f"{name} must be nonempty")
            if any(b < 1 for b in sched) or any(a > b for a, b in zip(sched, sched[1:])):
                raise StructuralError(f"{name} must be positive and nondecreasing")
            setattr(self, name, tuple(int(x) for x in sched))


@dataclasses.dataclass
class Report:
    """Outcome of a full optimization run."""

    final_qfi: float
    fom_history: list[float]
    optimal_state: MPS
    optimal_sld: SldMpo
    bond_dims_used: dict
    entropy_profile: list[float]
    converged: bool
    iterations: int
    degenerate_state_update: bool = False


# ---------------------------------------------------------------------------
# boundary-environment folding
#
# Every trace network here is a ring of site tensors (open chains are rings
# whose wraparound bond is one-dimensional).  A *suffix* environment at site n
# carries the contraction of sites n+1..N−1 as a tensor with the open bond
# legs of cut n plus one combined wraparound leg "w"; a *prefix* carries sites
# 0..n−1 with "w" first.  Site tensors fold in one at a time, so nothing
# larger than (bond legs × w) is ever stored.


def _wrap_ids(dims: Sequence[int]) -> np.ndarray:
    """Identity over the combined wraparound space, reshaped to (*dims, w)."""
    w = int(np.prod(dims))
    return np.eye(w, dtype=complex).reshape(*dims, w)


class _PairChain:
    """Tr(X L) with X an operator MPO and L the observable: pairing
    X[a,b,j,k]·L[l,r,k,j]."""

    def __init__(self, x: MPO, l_arrays: Sequence[np.ndarray]):
        self.x = x.arrays
        self.l = list(l_arrays)
        self.n = len(self.l)

    def suffix_init(self) -> np.ndarray:
        return _wrap_ids((self.x[-1].shape[1], self.l[-1].shape[1]))

    def prefix_init(self) -> np.ndarray:
        w = self.x[0].shape[0] * self.l[0].shape[0]
        return np.eye(w, dtype=complex).reshape(
            w, self.x[0].shape[0], self.l[0].shape[0]
        )

    def fold_right(self, n: int, suf: np.ndarray) -> np.ndarray:
        return np.einsum(
            "abjk,lrkj,brw->alw", self.x[n], self.l[n], suf, optimize=EINSUM_OPT
        )

    def fold_left(self, pre: np.ndarray, n: int) -> np.ndarray:
        return np.einsum(
            "wal,abjk,lrkj->wbr", pre, self.x[n], self.l[n], optimize=EINSUM_OPT
        )

    def value(self) -> complex:
        suf = self.suffix_init()
        for n in range(self.n - 1, -1, -1):
            suf = self.fold_right(n, suf)
        w = suf.shape[-1]
        return complex(np.trace(suf.reshape(w, w)))


class _TripleChain:
    """Tr(X L L): pairing X[a,b,j,k]·L[l,r,k,m]·L[x,y,m,j]."""

    def __init__(self, x: MPO, l_arrays: Sequence[np.ndarray]):
        self.x = x.arrays
        self.l = list(l_arrays)
        self.n = len(self.l)

    def suffix_init(self) -> np.ndarray:
        dl = self.l[-1].shape[1]
        return _wrap_ids((self.x[-1].shape[1], dl, dl))

    def prefix_init(self) -> np.ndarray:
        dl = self.l[0].shape[0]
        w = self.x[0].shape[0] * dl * dl
        return np.eye(w, dtype=complex).reshape(w, self.x[0].shape[0], dl, dl)

    def fold_right(self, n: int, suf: np.ndarray) -> np.ndarray:
        return np.einsum(
            "abjk,lrkm,xymj,bryw->alxw",
            self.x[n],
            self.l[n],
            self.l[n],
            suf,
            optimize=EINSUM_OPT,
        )

    def fold_left(self, pre: np.ndarray, n: int) -> np.ndarray:
        return np.einsum(
            "walx,abjk,lrkm,xymj->wbry",
            pre,
            self.x[n],
            self.l[n],
            self.l[n],
            optimize=EINSUM_OPT,
        )

    def value(self) -> complex:
        suf = self.suffix_init()
        for n in range(self.n - 1, -1, -1):
            suf = self.fold_right(n, suf)
        w = suf.shape[-1]
        return complex(np.trace(suf.reshape(w, w)))


class _SandwichChain:
    """⟨ψ|W|ψ⟩: pairing conj(ψ)[L,R,j]·W[l,r,j,k]·ψ[x,y,k]."""

    def __init__(self, psi_arrays: Sequence[np.ndarray], w: MPO):
        self.psi = list(psi_arrays)
        self.w = w.arrays
        self.n = len(self.psi)

    def suffix_init(self) -> np.ndarray:
        dp = self.psi[-1].shape[1]
        return _wrap_ids((dp, self.w[-1].shape[1], dp))

    def prefix_init(self) -> np.ndarray:
        dp = self.psi[0].shape[0]
        w = dp * self.w[0].shape[0] * dp
        return np.eye(w, dtype=complex).reshape(w, dp, self.w[0].shape[0], dp)

    def fold_right(self, n: int, suf: np.ndarray) -> np.ndarray:
        return np.einsum(
            "LRj,lrjk,xyk,Rryw->Llxw",
            self.psi[n].conj(),
            self.w[n],
            self.psi[n],
            suf,
            optimize=EINSUM_OPT,
        )

    def fold_left(self, pre: np.ndarray, n: int) -> np.ndarray:
        return np.einsum(
            "wLlx,LRj,lrjk,xyk->wRry",
            pre,
            self.psi[n].conj(),
            self.w[n],
            self.psi[n],
            optimize=EINSUM_OPT,
        )


def _suffix_list(chain) -> list[np.ndarray]:
    """suffixes[n] = contraction of sites n+1..N−1 (identity at the last site)."""
    sufs: list = [None] * chain.n
    sufs[chain.n - 1] = chain.suffix_init()
    for n in range(chain.n - 2, -1, -1):
        sufs[n] = chain.fold_right(n + 1, sufs[n + 1])
    return sufs


# ---------------------------------------------------------------------------
# figure-of-merit evaluation


def evaluate_fom(problem: FomProblem, l: SldMpo) -> float:
    """FoM(ψ, L) = 2·Tr(ρ'L) − Tr(ρL²), checked real."""
    arrs = l.arrays
    if isinstance(problem.rho_prime, DerivativeHandle):
        h = problem.rho_prime
        lin = (
            _PairChain(h.rho_plus, arrs).value() - _PairChain(h.rho, arrs).value()
        ) / h.eps
    else:
        lin = _PairChain(problem.rho_prime, arrs).value()
    quad = _TripleChain(problem.rho, arrs).value()
    value = 2 * lin - quad
    if abs(value.imag) > 1e-8 * max(1.0, abs(value.real)):
        raise ConvergenceError(
            f"figure of merit has imaginary residue {value.imag:.3g}; "
            "the network pairing is numerically inconsistent",
            residual=abs(value.imag),
        )
    return float(value.real)


# ---------------------------------------------------------------------------
# SLD sweep


def _sld_site_system(
    rho_site: np.ndarray,
    rho_prime_site: np.ndarray,
    pair_suf: np.ndarray,
    pair_pre: np.ndarray,
    triple_suf: np.ndarray,
    triple_pre: np.ndarray,
    d: int,
):
    """(Ã, b) of the local stationarity problem at one site: the global FoM
    equals 2·b·vec(S) − vec(S)ᵀÃ·vec(S) exactly, in the site layout
    (left, right, out, in)."""
    benv = np.einsum(
        "abjk,bcw,wad->cdjk", rho_prime_site, pair_suf, pair_pre, optimize=EINSUM_OPT
    )
    b = benv.transpose(1, 0, 3, 2).reshape(-1)
    envr = np.einsum(
        "abjk,bcdw,waef->cdefjk", rho_site, triple_suf, triple_pre, optimize=EINSUM_OPT
    )
    a = np.einsum("cdefjk,mM->eckmfdMj", envr, np.eye(d), optimize=EINSUM_OPT)
    rows = b.size
    a = a.reshape(rows, rows)
    return (a + a.T) / 2, b


def _local_fom(s_vec: np.ndarray, a_sym: np.ndarray, b: np.ndarray) -> float:
    return float((2 * b @ s_vec - s_vec @ a_sym @ s_vec).real)


def _regularized_solve(
    a_sym: np.ndarray, b: np.ndarray, s_old: np.ndarray, kappa: float
) -> np.ndarray:
    """Solve Ã·s = b with singular values below κ·s₁ treated as zero (the
    same cutoff rule as :func:`tnmetro.tensor.pseudo_inverse`).

    The incumbent solution's component inside the κ-kernel is retained only
    when it still earns figure of merit.  Kernel directions contribute
    nothing through the quadratic term, so their exact local contribution is
    the linear gain 2·Re(b·s_kernel): when a near-kernel direction carries
    genuine weight (its singular value slipped under the cutoff while the
    incumbent holds a large component there) the gain is positive and
    dropping it would make the figure of merit fall; when the component is
    stale noise the gain is at roundoff level and keeping it only drags the
    outer iteration, so it is zeroed (the minimal-norm pseudo-inverse
    answer).  Either branch never produces a smaller local figure of merit
    than the incumbent's."""
    u, sv, vh = np.linalg.svd(a_sym)
    if sv.size == 0 or sv[0] == 0.0:
        return s_old.copy()
    keep = sv >= kappa * sv[0]
    v_keep = vh[keep].conj().T
    solved = v_keep @ ((u[:, keep].conj().T @ b) / sv[keep])
    kernel_part = s_old - v_keep @ (v_keep.conj().T @ s_old)
    gain = 2.0 * (b @ kernel_part).real
    scale = max(float(np.linalg.norm(b) * np.linalg.norm(kernel_part)), 1.0)
    if gain > 1e-13 * scale:
        return solved + kernel_part
    return solved


def optimize_sld_sweep(
    problem: FomProblem,
    l0: SldMpo,
    config: OptimizationConfig,
    max_sweeps: int | None = None,
) -> tuple[SldMpo, float]:
    """Sweep the SLD sites left to right; each site is solved from the
    regularized stationarity equation Ã·vec(S) = b and Hermitian-filtered.
    Sweeps repeat until the FoM change falls below ``config.rel_tol`` (or
    ``max_sweeps`` is reached).  The FoM never decreases beyond a 10·κ
    relative slack; a larger drop aborts with advice to raise κ."""
    l0.check_gauge()
    rho = problem.rho
    rho_prime = problem.derivative_mpo()
    arrs = [a.copy() for a in l0.arrays]
    n = len(arrs)
    d = rho.phys_dim
    kappa = config.kappa

    pair = _PairChain(rho_prime, arrs)
    triple = _TripleChain(rho, arrs)

    fom_prev: float | None = None
    fom = 0.0
    sweep_mark: float | None = None
    sweeps = max_sweeps if max_sweeps is not None else 1000
    for _sweep in range(sweeps):
        pair_sufs = _suffix_list(pair)
        triple_sufs = _suffix_list(triple)
        pair_pre = pair.prefix_init()
        triple_pre = triple.prefix_init()
        for site in range(n):
            a_sym, b = _sld_site_system(
                rho.arrays[site],
                rho_prime.arrays[site],
                pair_sufs[site],
                pair_pre,
                triple_sufs[site],
                triple_pre,
                d,
            )
            s_old = arrs[site]
            if fom_prev is None:
                fom_prev = _local_fom(s_old.reshape(-1), a_sym, b)
            s_vec = _regularized_solve(a_sym, b, s_old.reshape(-1), kappa)
            s_new = s_vec.reshape(s_old.shape)
            s_new = (s_new + _phys_swap_conj(s_new)) / 2  # Hermitian filter
            fom = _local_fom(s_new.reshape(-1), a_sym, b)
            slack = 10 * kappa * max(abs(fom_prev), abs(fom), 1.0)
            if fom < fom_prev - slack:
                raise ConvergenceError(
                    f"figure of merit fell from {fom_prev:.12g} to {fom:.12g} "
                    f"at site {site}; the local solve is unstable — increase "
                    f"kappa (currently {kappa:g})",
                    residual=fom_prev - fom,
                )
            arrs[site] = s_new
            pair.l[site] = s_new
            triple.l[site] = s_new
            pair_pre = pair.fold_left(pair_pre, site)
            triple_pre = triple.fold_left(triple_pre, site)
            fom_prev = fom
        if sweep_mark is not None and abs(fom - sweep_mark) <= config.rel_tol * max(
            abs(fom), 1e-300
        ):
            break
        sweep_mark = fom
    out = SldMpo(MPO(arrs, l0.mpo.boundary))
    out.check_gauge()
    return out, float(fom)


def sld_site_residuals(problem: FomProblem, l: SldMpo, kappa: float) -> list[float]:
    """Per-site stationarity residuals ‖Ã·vec(S) − b‖/‖b‖, projected off the
    κ-kernel of Ã — all small at an SLD-sweep fixed point."""
    rho = problem.rho
    rho_prime = problem.derivative_mpo()
    arrs = l.arrays
    d = rho.phys_dim
    pair = _PairChain(rho_prime, arrs)
    triple = _TripleChain(rho, arrs)
    pair_sufs = _suffix_list(pair)
    triple_sufs = _suffix_list(triple)
    pair_pre = pair.prefix_init()
    triple_pre = triple.prefix_init()
    out = []
    for site in range(len(arrs)):
        a_sym, b = _sld_site_system(
            rho.arrays[site],
            rho_prime.arrays[site],
            pair_sufs[site],
            pair_pre,
            triple_sufs[site],
            triple_pre,
            d,
        )
        resid = a_sym @ arrs[site].reshape(-1) - b
        u, sv, _vh = np.linalg.svd(a_sym)
        keep = sv >= kappa * (sv[0] if sv.size else 0.0)
        resid = u[:, keep].conj().T @ resid
        out.append(float(np.linalg.norm(resid) / max(np.linalg.norm(b), 1e-300)))
        pair_pre = pair.fold_left(pair_pre, site)
        triple_pre = triple.fold_left(triple_pre, site)
    return out


# ---------------------------------------------------------------------------
# dual operators and the state sweep


def as_ring(mpo: MPO) -> MPO:
    """Relabel an open chain (edge bonds 1) as a ring so it can meet ring
    operators; the wraparound bond is trivial, so the represented operator is
    unchanged."""
    if mpo.boundary == "pbc":
        return mpo
    if mpo.boundary != "obc":
        raise StructuralError("only open chains can be relabeled as rings")
    if mpo.arrays[0].shape[0] != 1 or mpo.arrays[-1].shape[1] != 1:
        raise StructuralError("edge bonds must be one-dimensional")
    return MPO(mpo.arrays, "pbc")


def build_dual_operators(
    l: SldMpo, gates: NoiseGateSet, phi: float = 0.0, boundary: str = "pbc"
) -> tuple[MPO, MPO]:
    """(L*₂, L'*) = (Λ*(L²), i[H, Λ*(L)]) as MPOs.

    Bond dimensions come out as D_L²·D_r and 2·D_L·D_r, with D_r the channel
    bond dimension."""
    l.check_gauge()
    lmpo = l.mpo
    lsq = mpo_multiply(lmpo, lmpo)
    if boundary == "pbc":
        lsq = as_ring(lsq)
        lmpo = as_ring(lmpo)
    l2_star = apply_dual_channel(lsq, gates, phi)
    dual_l = apply_dual_channel(lmpo, gates, phi)
    lprime_star = build_rho_prime_mpo(dual_l, gates.generator, scalar=-1j)
    return l2_star, lprime_star


def _compress_mpo_links(
    mpo: MPO, rel_cutoff: float = 1e-12, max_bond: int | None = None
) -> MPO:
    """Truncate an MPO's internal links to its numerical operator-Schmidt
    rank (singular values below ``rel_cutoff`` of each cut's largest are
    dropped).  Works for rings too: the wraparound bond is absorbed into the
    edge sites' physical legs and restored afterwards, so only internal links
    are touched."""
    arrs = mpo.arrays
    n = len(arrs)
    if n == 1:
        return mpo
    d = mpo.phys_dim
    w = arrs[0].shape[0]
    merged = []
    for i, a in enumerate(arrs):
        if i == 0:
            merged.append(a.transpose(1, 0, 2, 3).reshape(1, a.shape[1], w * d * d))
        elif i == n - 1:
            merged.append(a.reshape(a.shape[0], 1, w * d * d))
        else:
            merged.append(a.reshape(a.shape[0], a.shape[1], d * d))
    # forward QR pass: left-orthogonalize without truncation
    for i in range(n - 1):
        dl, dr, p = merged[i].shape
        q, r = np.linalg.qr(merged[i].transpose(0, 2, 1).reshape(dl * p, dr))
        merged[i] = q.reshape(dl, p, q.shape[1]).transpose(0, 2, 1)
        merged[i + 1] = np.einsum("ab,bRp->aRp", r, merged[i + 1])
    # backward SVD pass: truncate each link
    for i in range(n - 1, 0, -1):
        dl, dr, p = merged[i].shape
        u, s, vh = np.linalg.svd(
            merged[i].transpose(0, 2, 1).reshape(dl, p * dr), full_matrices=False
        )
        keep = s >= rel_cutoff * (s[0] if s.size else 0.0)
        if max_bond is not None:
            keep[max_bond:] = False
        u, s, vh = u[:, keep], s[keep], vh[keep]
        merged[i] = vh.reshape(s.size, p, dr).transpose(0, 2, 1)
        merged[i - 1] = np.einsum("aRp,Rb->abp", merged[i - 1], u * s)
    out = []
    for i, m in enumerate(merged):
        if i == 0:
            out.append(m.reshape(m.shape[1], w, d, d).transpose(1, 0, 2, 3))
        elif i == n - 1:
            out.append(m.reshape(m.shape[0], w, d, d).transpose(0, 1, 2, 3))
        else:
            out.append(m.reshape(m.shape[0], m.shape[1], d, d))
    return MPO(out, mpo.boundary)


def _right_canonicalize_arrays(arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Bring MPS site arrays (L, R, p) to right-canonical form; the norm and
    phase collect in site 0."""
    arrays = [a.copy() for a in arrays]
    for i in range(len(arrays) - 1, 0, -1):
        dl, dr, d = arrays[i].shape
        m = arrays[i].transpose(0, 2, 1).reshape(dl, d * dr)
        u, s, vh = np.linalg.svd(m, full_matrices=False)
        arrays[i] = vh.reshape(vh.shape[0], d, dr).transpose(0, 2, 1)
        arrays[i - 1] = np.einsum("lrp,rx->lxp", arrays[i - 1], u * s)
    return arrays


def optimize_input_state(
    psi0: MPS,
    l: SldMpo,
    gates: NoiseGateSet,
    config: OptimizationConfig,
    phi: float = 0.0,
    boundary: str = "pbc",
    sweeps: int = 1,
) -> tuple[MPS, float, bool]:
    """Maximize the FoM over the probe state at fixed L by one-site sweeps on
    ⟨ψ|2L'* − L*₂|ψ⟩.  In mixed-canonical gauge the norm constraint is the
    identity, so each site update is a plain Hermitian eigenproblem.

    Returns (state, fom, degenerate_top_eigenvalue_seen)."""
    if psi0.boundary != "obc":
        raise StructuralError("probe states are open-boundary chains")
    l2_star, lprime_star = build_dual_operators(l, gates, phi, boundary)
    v_op = mpo_add(lprime_star, l2_star, 2.0, -1.0)
    arrays = [a.copy() for a in psi0.arrays]
    n = len(arrays)
    degenerate = False
    fom_prev: float | None = None
    fom = 0.0
    for _ in range(sweeps):
        # mixed-canonical with the center at site 0, so every local norm
        # matrix along the left-to-right sweep is the identity
        arrays = _right_canonicalize_arrays(arrays)
        arrays[0] = arrays[0] / np.linalg.norm(arrays[0])
        chain = _SandwichChain(arrays, v_op)
        sufs = _suffix_list(chain)
        pre = chain.prefix_init()
        for site in range(n):
            a = arrays[site]
            w = v_op.arrays[site]
            eff = np.einsum(
                "ABCw,wabc,bBjk->ajAckC", sufs[site], pre, w, optimize=EINSUM_OPT
            )
            rows = a.shape[0] * a.shape[2] * a.shape[1]
            eff = eff.reshape(rows, rows)
            eff = (eff + eff.conj().T) / 2
            vals, vecs = np.linalg.eigh(eff)
            fom = float(vals[-1])
            if vals.size > 1 and vals[-1] - vals[-2] <= 1e-10 * max(1.0, abs(vals[-1])):
                degenerate = True
            if fom_prev is not None and fom < fom_prev - 1e-9 * max(1.0, abs(fom_prev)):
                raise ConvergenceError(
                    f"state update decreased the figure of merit "
                    f"({fom_prev:.12g} → {fom:.12g} at site {site})",
                    residual=fom_prev - fom,
                )
            fom_prev = fom
            x = vecs[:, -1].reshape(a.shape[0], a.shape[2], a.shape[1])
            arrays[site] = x.transpose(0, 2, 1)
            if site < n - 1:
                dl, dr, d = arrays[site].shape
                m = arrays[site].transpose(0, 2, 1).reshape(dl * d, dr)
                u, s, vh = np.linalg.svd(m, full_matrices=False)
                arrays[site] = u.reshape(dl, d, u.shape[1]).transpose(0, 2, 1)
                arrays[site + 1] = np.einsum(
                    "xl,lrp->xrp", s[:, None] * vh, arrays[site + 1]
                )
                chain.psi[site] = arrays[site]
                chain.psi[site + 1] = arrays[site + 1]
                sufs[site] = chain.fold_right(site + 1, sufs[site + 1])
            pre = chain.fold_left(pre, site)
    return MPS(arrays, "obc"), float(fom), degenerate


# ---------------------------------------------------------------------------
# initialization and bond growth


def state_density_mpo(psi: MPS) -> MPO:
    """|ψ⟩⟨ψ| as an MPO (link dimensions square)."""
    arrays = []
    for a in psi.arrays:
        z = np.einsum("LRj,lrk->LlRrjk", a, a.conj())
        arrays.append(
            z.reshape(a.shape[0] ** 2, a.shape[1] ** 2, a.shape[2], a.shape[2])
        )
    return MPO(arrays, psi.boundary)


def initial_state(n: int, d: int = 2) -> MPS:
    """Product probe along the generator equator: |+⟩^⊗N (D_ψ = 1)."""
    vec = np.ones(d, dtype=complex) / math.sqrt(d)
    return MPS([vec.reshape(1, 1, d).copy() for _ in range(n)], "obc")


def _single_site_sld(model: DephasingModel) -> np.ndarray:
    """Dense SLD of one dephased equatorial qubit — the uncorrelated-limit seed."""
    from .oracle import DenseState, dephasing_derivative, exact_channel, exact_sld

    d = model.phys_dim
    plus = DenseState.from_pure(np.ones(d) / math.sqrt(d))
    single = dataclasses.replace(model, c2=0.0)
    rho = exact_channel(plus, single, boundary="obc").matrix
    rho_prime = dephasing_derivative(rho, single.generator.eigenvalues)
    return exact_sld(rho, rho_prime)


def initial_sld(model: DephasingModel, n: int) -> SldMpo:
    """L₀ = Σ_n (I ⊗ … ⊗ L₁ ⊗ … ⊗ I) with L₁ the one-body SLD — an open-chain
    MPO with D_L = 2, the exact optimum shape in the uncorrelated limit."""
    d = model.phys_dim
    l1 = _single_site_sld(model).astype(complex)
    eye = np.eye(d, dtype=complex)
    zero = np.zeros((d, d), dtype=complex)
    if n == 1:
        return SldMpo(MPO([l1[None, None]], "obc"))
    first = np.stack([l1, eye])[None]  # (1, 2, d, d)
    last = np.stack([eye, l1])[:, None]  # (2, 1, d, d)
    mid = np.array([[eye, zero], [l1, eye]])  # (2, 2, d, d)
    arrays = [first] + [mid.copy() for _ in range(n - 2)] + [last]
    return SldMpo(MPO(arrays, "obc"))


def _padded(a: np.ndarray, dl: int, dr: int, rng, scale: float) -> np.ndarray:
    out = np.zeros((dl, dr) + a.shape[2:], dtype=complex)
    out[: a.shape[0], : a.shape[1]] = a
    if scale > 0:
        noise = rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape)
        mask = np.ones(out.shape, dtype=bool)
        mask[: a.shape[0], : a.shape[1]] = False
        out[mask] += (scale * noise)[mask]
    return out


def _bond_caps(n: int, per_site: int) -> list[int]:
    """Maximal useful bond at each of the n−1 open-chain links."""
    return [
        min(per_site ** min(i + 1, 30), per_site ** min(n - 1 - i, 30))
        for i in range(n - 1)
    ]


def expand_state_bonds(psi: MPS, d_psi: int, rng) -> MPS:
    """Grow every link of an open-chain MPS toward ``d_psi`` (capped by the
    exact Schmidt rank), seeding the new directions with small noise."""
    arrays = [a.copy() for a in psi.arrays]
    n, d = len(arrays), psi.phys_dim
    caps = _bond_caps(n, d)
    scale = 1e-3 * max(float(np.mean([np.abs(a).mean() for a in arrays])), 1e-12)
    for i in range(n - 1):
        target = min(d_psi, caps[i])
        if arrays[i].shape[1] >= target:
            continue
        arrays[i] = _padded(arrays[i], arrays[i].shape[0], target, rng, scale)
        arrays[i + 1] = _padded(arrays[i + 1], target, arrays[i + 1].shape[1], rng, scale)
    return MPS(arrays, "obc")


def expand_sld_bonds(l: SldMpo, d_l: int, rng) -> SldMpo:
    """Grow the observable's links toward ``d_l``, with the injected noise
    symmetrized so the Hermitian gauge survives."""
    arrays = [a.copy() for a in l.arrays]
    n = len(arrays)
    d = arrays[0].shape[2]
    caps = _bond_caps(n, d * d)
    scale = 1e-3 * max(float(np.mean([np.abs(a).mean() for a in arrays])), 1e-12)
    for i in range(n - 1):
        target = min(d_l, caps[i])
        if arrays[i].shape[1] >= target:
            continue
        arrays[i] = _padded(arrays[i], arrays[i].shape[0], target, rng, scale)
        arrays[i + 1] = _padded(arrays[i + 1], target, arrays[i + 1].shape[1], rng, scale)
    arrays = [(a + _phys_swap_conj(a)) / 2 for a in arrays]
    return SldMpo(MPO(arrays, l.mpo.boundary))


# ---------------------------------------------------------------------------
# outer loop


def make_problem(
    psi: MPS,
    model: DephasingModel,
    gates: NoiseGateSet | None = None,
    boundary: str = "pbc",
    phi: float = 0.0,
) -> FomProblem:
    """Assemble the FoM instance for a probe state: ρ = Λ_φ(|ψ⟩⟨ψ|) and
    ρ' = i[ρ, H] as MPOs."""
    gates = gates or build_dephasing_gates(model)
    norm = psi.norm()
    arrays = [a.copy() for a in psi.arrays]
    if abs(norm - 1.0) > 1e-12:
        arrays[0] = arrays[0] / norm
    rho0 = state_density_mpo(MPS(arrays, psi.boundary))
    if boundary == "pbc":
        rho0 = as_ring(rho0)
    rho = apply_channel(rho0, gates, phi)
    rho_prime = build_rho_prime_mpo(rho, model.generator, scalar=1j)
    return FomProblem(rho=rho, rho_prime=rho_prime, generator=model.generator)


def run_qfi_optimization(
    model: DephasingModel,
    n: int,
    config: OptimizationConfig | None = None,
    boundary: str = "pbc",
    phi: float = 0.0,
) -> Report:
    """Alternate SLD and state sweeps, escalating D_ψ and then D_L on the
    configured schedules until the answer moves by less than ``stage_tol``
    (default 1%) per stage.

    Each outer iteration rebuilds the channel output for the current probe,
    runs a few SLD sweeps, and then reoptimizes the probe at fixed L.  A
    stage (fixed bond dimensions) converges when the FoM change drops below
    ``config.rel_tol``; exhausting ``max_outer_iters`` everywhere marks the
    report unconverged rather than raising."""
    config = config or OptimizationConfig()
    rng = np.random.default_rng(config.seed)
    gates = build_dephasing_gates(model)

    psi = initial_state(n, model.phys_dim)
    l = initial_sld(model, n)

    d_l0 = config.d_l_schedule[0]
    stages = [(dp, d_l0) for dp in config.d_psi_schedule]
    stages += [(config.d_psi_schedule[-1], dl) for dl in config.d_l_schedule[1:]]

    fom_history: list[float] = []
    stage_values: list[float] = []
    stage_records: list[dict] = []
    degenerate = False
    converged = True
    iterations = 0
    fom = 0.0
    for d_psi, d_l in stages:
        psi = expand_state_bonds(psi, d_psi, rng)
        l = expand_sld_bonds(l, d_l, rng)
        stage_converged = False
        fom_prev: float | None = None
        for _ in range(config.max_outer_iters):
            iterations += 1
            problem = make_problem(psi, model, gates, boundary, phi)
            l, _ = optimize_sld_sweep(problem, l, config, max_sweeps=3)
            psi, fom, degen = optimize_input_state(
                psi, l, gates, config, phi=phi, boundary=boundary, sweeps=1
            )
            degenerate = degenerate or degen
            fom_history.append(fom)
            if fom_prev is not None and abs(fom - fom_prev) <= config.rel_tol * max(
                abs(fom), 1e-300
            ):
                stage_converged = True
                break
            fom_prev = fom
        if not stage_converged:
            converged = False
            log.warning(
                "stage (d_psi=%d, d_l=%d) hit max_outer_iters=%d before the "
                "figure of merit settled",
                d_psi,
                d_l,
                config.max_outer_iters,
            )
        stage_values.append(fom)
        stage_records.append({"d_psi": d_psi, "d_l": d_l, "fom": fom})
        if len(stage_values) > 1:
            prev, cur = stage_values[-2], stage_values[-1]
            if abs(cur - prev) < config.stage_tol * max(abs(cur), 1e-300):
                break

    psi_final = psi.left_canonicalize()
    return Report(
        final_qfi=fom,
        fom_history=fom_history,
        optimal_state=psi_final,
        optimal_sld=l,
        bond_dims_used={
            "d_psi": max(psi_final.bond_dims),
            "d_l": l.d_l,
            "stages": stage_records,
        },
        entropy_profile=entropy_profile(psi_final),
        converged=converged,
        iterations=iterations,
        degenerate_state_update=degenerate,
    )


# ---------------------------------------------------------------------------
# report serialization


def report_to_text(report: Report) -> str:
    """Render a Report as a structured-text document with embedded
    TNMETRO-NET-1 blocks for the state and the observable."""
    lines = [
        "TNMETRO-REPORT-1",
        f"final_qfi = {report.final_qfi:.12g}",
        f"converged = {str(report.converged).lower()}",
        f"iterations = {report.iterations}",
        f"d_psi = {report.bond_dims_used['d_psi']}",
        f"d_l = {report.bond_dims_used['d_l']}",
        "entropy_profile = " + " ".join(f"{x:.12g}" for x in report.entropy_profile),
        f"degenerate_state_update = {str(report.degenerate_state_update).lower()}",
        "fom_history:",
    ]
    lines += [f"  {i + 1} {x:.12g}" for i, x in enumerate(report.fom_history)]
    lines.append("network optimal_state")
    lines.append(network_to_text(report.optimal_state).rstrip("\n"))
    lines.append("network optimal_sld")
    lines.append(network_to_text(report.optimal_sld.mpo).rstrip("\n"))
    return "\n".join(lines) + "\n"


def save_report(report: Report, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report_to_text(report))
