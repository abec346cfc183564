"""Matrix-product states and operators: data model and structural operations.

Site-tensor conventions (fixed axis order inside ``Tensor`` wrappers):

* MPO site: ``(L, R, out, in)`` — left bond, right bond, physical row,
  physical column.
* MPS site: ``(L, R, p)``.

Boundary modes: ``"obc"`` (edge bonds of dimension 1), ``"pbc"`` (the last
bond wraps around to the first site), ``"ti"`` (a single site tensor
representing an infinite translation-invariant chain).

Dense round-trips order the many-body basis with site 0 most significant.
Serialization uses the TNMETRO-NET-1 text format (see :func:`save_network`).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import StructuralError, Tensor, eig_leading, svd_truncate

MPO_LEGS = ("L", "R", "out", "in")
MPS_LEGS = ("L", "R", "p")

_BOUNDARIES = ("obc", "pbc", "ti")


def _as_site(a, legs) -> Tensor:
    if isinstance(a, Tensor):
        if a.labels != legs:
            a = a.transpose(legs) if set(a.labels) == set(legs) else Tensor(a.data, legs)
        return a
    a = np.asarray(a, dtype=complex)
    if a.ndim != len(legs):
        raise StructuralError(f"site tensor has {a.ndim} axes, expected {len(legs)}")
    return Tensor(a, legs)


class _Network:
    """Shared chain validation for MPS and MPO."""

    legs: tuple[str, ...] = ()

    def __init__(self, sites: Sequence, boundary: str):
        if boundary not in _BOUNDARIES:
            raise StructuralError(f"unknown boundary {boundary!r}")
        sites = [_as_site(s, self.legs) for s in sites]
        if not sites:
            raise StructuralError("a network needs at least one site")
        if boundary == "ti" and len(sites) != 1:
            raise StructuralError("a translation-invariant network holds exactly one site")
        n = len(sites)
        for i, s in enumerate(sites):
            nxt = sites[(i + 1) % n]
            if s.data.shape[1] != nxt.data.shape[0]:
                if boundary != "obc" or i != n - 1:
                    raise StructuralError(
                        f"bond mismatch between site {i} (right {s.data.shape[1]}) "
                        f"and site {(i + 1) % n} (left {nxt.data.shape[0]})"
                    )
        if boundary == "obc":
            if sites[0].data.shape[0] != 1 or sites[-1].data.shape[1] != 1:
                raise StructuralError("open-boundary edge bonds must have dimension 1")
        d = sites[0].data.shape[2]
        for i, s in enumerate(sites):
            if any(dim != d for dim in s.data.shape[2:]):
                raise StructuralError(f"site {i} has physical dims {s.data.shape[2:]}, expected {d}")
        self.sites = sites
        self.boundary = boundary

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def phys_dim(self) -> int:
        return self.sites[0].data.shape[2]

    @property
    def arrays(self) -> list[np.ndarray]:
        return [s.data for s in self.sites]

    @property
    def bond_dims(self) -> tuple[int, ...]:
        """Dimension of link n (connecting site n to site n+1 mod N).

        For OBC the last entry is the trivial wraparound bond (always 1).
        For TI this is the single bond dimension.
        """
        return tuple(s.data.shape[1] for s in self.sites)


class MatrixProductOperator(_Network):
    legs = MPO_LEGS

    def copy(self) -> "MatrixProductOperator":
        return MatrixProductOperator([s.data.copy() for s in self.sites], self.boundary)

    def scale(self, factor: complex) -> "MatrixProductOperator":
        """Multiply the operator by a scalar (absorbed into site 0)."""
        arrays = [s.data.copy() for s in self.sites]
        arrays[0] = arrays[0] * factor
        return MatrixProductOperator(arrays, self.boundary)

    def transpose_phys(self) -> "MatrixProductOperator":
        """Swap each site's physical legs (operator transpose in MPO form)."""
        return MatrixProductOperator(
            [s.data.transpose(0, 1, 3, 2) for s in self.sites], self.boundary
        )

    def conj(self) -> "MatrixProductOperator":
        return MatrixProductOperator([s.data.conj() for s in self.sites], self.boundary)

    def dagger(self) -> "MatrixProductOperator":
        return self.conj().transpose_phys()

    def __repr__(self) -> str:
        return (
            f"MPO(n={self.n_sites}, d={self.phys_dim}, boundary={self.boundary}, "
            f"bonds={self.bond_dims})"
        )


class MatrixProductState(_Network):
    legs = MPS_LEGS

    def __init__(self, sites, boundary, canonical: str | None = None):
        super().__init__(sites, boundary)
        if canonical is not None and boundary != "obc":
            raise StructuralError("canonical form is defined only for open boundaries")
        self.canonical = canonical

    def copy(self) -> "MatrixProductState":
        return MatrixProductState(
            [s.data.copy() for s in self.sites], self.boundary, self.canonical
        )

    def is_left_canonical(self, tol: float = 1e-10) -> bool:
        """All sites are left isometries; the last may carry the state norm
        (isometric up to a positive scalar)."""
        if self.boundary != "obc":
            return False
        for i, s in enumerate(self.arrays):
            m = s.transpose(0, 2, 1).reshape(-1, s.shape[1])
            gram = m.conj().T @ m
            scale = 1.0
            if i == len(self.arrays) - 1:
                scale = max(float(np.trace(gram).real) / s.shape[1], 1e-300)
            if np.linalg.norm(gram - scale * np.eye(s.shape[1])) > tol * scale:
                return False
        return True

    def left_canonicalize(
        self, max_bond: int | None = None, rel_cutoff: float = 0.0
    ) -> "MatrixProductState":
        """Return a left-canonical copy (OBC only), optionally truncated."""
        if self.boundary != "obc":
            raise StructuralError("canonicalization requires open boundaries")
        arrays = [a.copy() for a in self.arrays]
        for i in range(len(arrays)):
            a = arrays[i]
            t = Tensor(a.transpose(0, 2, 1), ("L", "p", "R"))
            res = svd_truncate(t, ["L", "p"], ["R"], max_rank=max_bond, rel_cutoff=rel_cutoff)
            u = res.u.data  # (L, p, bond)
            arrays[i] = u.transpose(0, 2, 1)  # (L, bond, p)
            carry = (res.s[:, None] * res.vdag.data).astype(complex)  # (bond, R)
            if i + 1 < len(arrays):
                arrays[i + 1] = np.einsum("ab,bRp->aRp", carry, arrays[i + 1])
            else:
                # final carry is the 1x1 norm-and-phase factor; keep the
                # represented state exactly equal by absorbing it here.
                arrays[i] = arrays[i] * carry[0, 0]
        return MatrixProductState(arrays, "obc", canonical="left")

    def norm(self) -> float:
        """2-norm of the represented state."""
        if self.boundary == "ti":
            raise StructuralError("use transfer matrices for infinite states")
        e = None
        for a in self.arrays:
            m = np.einsum("LRp,lrp->LlRr", a.conj(), a)
            m = m.reshape(a.shape[0] ** 2, a.shape[1] ** 2)
            e = m if e is None else e @ m
        return float(np.sqrt(abs(np.trace(e))))

    def __repr__(self) -> str:
        return (
            f"MPS(n={self.n_sites}, d={self.phys_dim}, boundary={self.boundary}, "
            f"bonds={self.bond_dims})"
        )


# short aliases used throughout the package
MPO = MatrixProductOperator
MPS = MatrixProductState


def identity_mpo(n: int, d: int, boundary: str = "obc") -> MPO:
    site = np.eye(d, dtype=complex).reshape(1, 1, d, d)
    if boundary == "ti":
        return MPO([site], "ti")
    return MPO([site.copy() for _ in range(n)], boundary)


def product_mpo(ops: Iterable[np.ndarray], boundary: str = "obc") -> MPO:
    """MPO for a tensor product of single-site operators."""
    sites = [np.asarray(o, dtype=complex).reshape(1, 1, *np.shape(o)) for o in ops]
    return MPO(sites, boundary)


def product_mps(vecs: Iterable[np.ndarray], boundary: str = "obc") -> MPS:
    sites = [np.asarray(v, dtype=complex).reshape(1, 1, -1) for v in vecs]
    return MPS(sites, boundary)


def vectorize(mpo: MPO) -> MPS:
    """Merge each site's (out, in) legs into one physical leg of dim d²."""
    arrays = []
    for a in mpo.arrays:
        dl, dr, d, _ = a.shape
        arrays.append(a.reshape(dl, dr, d * d))
    return MPS(arrays, mpo.boundary)


def devectorize(mps: MPS, d: int | None = None) -> MPO:
    """Inverse of :func:`vectorize`."""
    if d is None:
        d = math.isqrt(mps.phys_dim)
    if d * d != mps.phys_dim:
        raise StructuralError(f"physical dim {mps.phys_dim} is not a perfect square")
    arrays = []
    for a in mps.arrays:
        dl, dr, _ = a.shape
        arrays.append(a.reshape(dl, dr, d, d))
    return MPO(arrays, mps.boundary)


def mpo_multiply(a: MPO, b: MPO) -> MPO:
    """Operator product a·b as an MPO with link dims D_a·D_b."""
    if a.boundary != b.boundary or a.n_sites != b.n_sites or a.phys_dim != b.phys_dim:
        raise StructuralError("operands must share length, physical dim, and boundary")
    arrays = []
    for x, y in zip(a.arrays, b.arrays):
        z = np.einsum("LRjm,lrmk->LlRrjk", x, y)
        dl, dr = x.shape[0] * y.shape[0], x.shape[1] * y.shape[1]
        arrays.append(z.reshape(dl, dr, x.shape[2], y.shape[3]))
    return MPO(arrays, a.boundary)


def mpo_apply(op: MPO, psi: MPS) -> MPS:
    """Apply an (super)operator MPO to a state sitewise: |ψ'⟩ = O|ψ⟩.

    Link dims multiply (D_O·D_ψ)."""
    if op.boundary != psi.boundary or op.n_sites != psi.n_sites:
        raise StructuralError("operator and state must share length and boundary")
    if op.phys_dim != psi.phys_dim:
        raise StructuralError(
            f"operator acts on dim {op.phys_dim}, state has dim {psi.phys_dim}"
        )
    arrays = []
    for o, p in zip(op.arrays, psi.arrays):
        z = np.einsum("LRxy,lry->LlRrx", o, p)
        dl, dr = o.shape[0] * p.shape[0], o.shape[1] * p.shape[1]
        arrays.append(z.reshape(dl, dr, o.shape[2]))
    return MPS(arrays, psi.boundary)


def mpo_add(a: MPO, b: MPO, wa: complex = 1.0, wb: complex = 1.0) -> MPO:
    """Weighted sum wa·A + wb·B as a direct-sum MPO (finite chains only)."""
    if a.boundary != b.boundary or a.n_sites != b.n_sites or a.phys_dim != b.phys_dim:
        raise StructuralError("operands must share length, physical dim, and boundary")
    if a.boundary == "ti":
        raise StructuralError(
            "infinite chains have no direct-sum form; keep the pair and combine "
            "transfer spectra downstream"
        )
    a = a.scale(wa)
    b = b.scale(wb)
    n, d = a.n_sites, a.phys_dim
    arrays = []
    for i, (x, y) in enumerate(zip(a.arrays, b.arrays)):
        dlx, drx = x.shape[:2]
        dly, dry = y.shape[:2]
        if a.boundary == "obc" and n == 1:
            z = x + y
        elif a.boundary == "obc" and i == 0:
            z = np.zeros((1, drx + dry, d, d), dtype=complex)
            z[:, :drx] = x
            z[:, drx:] = y
        elif a.boundary == "obc" and i == n - 1:
            z = np.zeros((dlx + dly, 1, d, d), dtype=complex)
            z[:dlx] = x
            z[dlx:] = y
        else:
            z = np.zeros((dlx + dly, drx + dry, d, d), dtype=complex)
            z[:dlx, :drx] = x
            z[dlx:, drx:] = y
        arrays.append(z)
    return MPO(arrays, a.boundary)


def mpo_trace(mpo: MPO) -> complex:
    """Trace of a finite MPO (OBC or PBC)."""
    if mpo.boundary == "ti":
        raise StructuralError("trace of an infinite chain is defined per site; use transfer matrices")
    e = None
    for a in mpo.arrays:
        m = np.einsum("LRjj->LR", a)
        e = m if e is None else e @ m
    return complex(np.trace(e))


def mpo_expectation(psi: MPS, op: MPO) -> complex:
    """⟨ψ|O|ψ⟩ for finite chains (no normalization applied)."""
    if psi.boundary == "ti" or op.boundary == "ti":
        raise StructuralError("use transfer matrices for infinite chains")
    if psi.n_sites != op.n_sites or psi.phys_dim != op.phys_dim:
        raise StructuralError("state and operator are incompatible")
    e = None
    for p, o in zip(psi.arrays, op.arrays):
        m = np.einsum("LRj,lrjk,xyk->LlxRry", p.conj(), o, p)
        m = m.reshape(int(np.prod(m.shape[:3])), -1)
        e = m if e is None else e @ m
    return complex(np.trace(e))


@dataclasses.dataclass
class TransferMatrix:
    """A dense transfer matrix on a product of bond spaces.

    ``matrix`` maps the right combined bond index to the left one, so a chain
    contracts as ``E_1 @ E_2 @ ... @ E_n`` and a ring closes with a trace.
    """

    source: str
    dims: tuple[int, ...]
    matrix: np.ndarray

    def leading(self, tol: float = 1e-10, physical: bool = False):
        """Leading eigenvalue with bilinearly normalized right/left vectors.

        With ``physical=True`` the eigenvalue must be real-dominated
        (imaginary part ≤ 1e-8 relative), as required for trace/norm
        sandwiches of well-formed networks.
        """
        lam, r, l = eig_leading(self.matrix, tol=tol)
        if physical and abs(lam.imag) > 1e-8 * max(abs(lam), 1e-300):
            raise StructuralError(
                f"physical transfer matrix has complex leading eigenvalue {lam:.6g}; "
                "the upstream network is malformed"
            )
        return lam, r, l


def _site_array(x, legs) -> np.ndarray:
    if isinstance(x, _Network):
        return x.sites[0].data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=complex)


def transfer_matrix(spec: tuple) -> TransferMatrix:
    """Build a transfer matrix from a sandwich description.

    ``spec`` is a tuple whose first entry names the sandwich and whose
    remaining entries are site tensors (ndarray, Tensor, or a TI network):

    * ``("trace", m)`` — Tr over the physical legs of one MPO site.
    * ``("trace_product", a, b)`` — Tr(A·B) sandwich.
    * ``("trace_triple", a, b, c)`` — Tr(A·B·C) sandwich.
    * ``("expectation", psi, o)`` — ⟨ψ|O|ψ⟩ sandwich.
    * ``("norm", psi)`` — ⟨ψ|ψ⟩ sandwich.
    """
    kind, *parts = spec
    if kind == "trace":
        (m,) = (_site_array(p, MPO_LEGS) for p in parts)
        e = np.einsum("LRjj->LR", m)
        dims = (m.shape[0],)
        return TransferMatrix("trace", dims, e)
    if kind == "trace_product":
        a, b = (_site_array(p, MPO_LEGS) for p in parts)
        if a.shape[2] != b.shape[2]:
            raise StructuralError("physical dims differ in trace_product sandwich")
        e = np.einsum("LRjk,lrkj->LlRr", a, b)
        dims = (a.shape[0], b.shape[0])
        return TransferMatrix(
            "trace_product", dims, e.reshape(a.shape[0] * b.shape[0], -1)
        )
    if kind == "trace_triple":
        a, b, c = (_site_array(p, MPO_LEGS) for p in parts)
        if not (a.shape[2] == b.shape[2] == c.shape[2]):
            raise StructuralError("physical dims differ in trace_triple sandwich")
        e = np.einsum("LRjk,lrkm,xymj->LlxRry", a, b, c)
        dims = (a.shape[0], b.shape[0], c.shape[0])
        return TransferMatrix(
            "trace_triple", dims, e.reshape(int(np.prod(dims)), -1)
        )
    if kind == "expectation":
        psi, o = parts
        p = _site_array(psi, MPS_LEGS)
        om = _site_array(o, MPO_LEGS)
        if p.shape[2] != om.shape[2]:
            raise StructuralError("physical dims differ in expectation sandwich")
        e = np.einsum("LRj,lrjk,xyk->LlxRry", p.conj(), om, p)
        dims = (p.shape[0], om.shape[0], p.shape[0])
        return TransferMatrix("expectation", dims, e.reshape(int(np.prod(dims)), -1))
    if kind == "norm":
        (psi,) = parts
        p = _site_array(psi, MPS_LEGS)
        e = np.einsum("LRj,lrj->LlRr", p.conj(), p)
        dims = (p.shape[0], p.shape[0])
        return TransferMatrix("norm", dims, e.reshape(p.shape[0] ** 2, -1))
    raise StructuralError(f"unknown sandwich kind {kind!r}")


# ---------------------------------------------------------------------------
# dense round-trips


def state_to_dense(psi: MPS) -> np.ndarray:
    """Dense state vector, site 0 most significant."""
    if psi.boundary == "ti":
        raise StructuralError("cannot densify an infinite chain")
    acc = psi.arrays[0]  # (L, R, p) -> carry (L, R, phys...)
    acc = acc.transpose(0, 2, 1)  # (L, p, R)
    for a in psi.arrays[1:]:
        acc = np.tensordot(acc, a.transpose(0, 2, 1), axes=(-1, 0))
    # acc: (L, p1, ..., pN, R); close the wrap bond
    acc = np.trace(acc, axis1=0, axis2=-1)
    return acc.reshape(-1)


def to_dense(mpo: MPO) -> np.ndarray:
    """Dense matrix of a finite MPO, basis ordered with site 0 most significant."""
    vec = state_to_dense(vectorize(mpo))
    n, d = mpo.n_sites, mpo.phys_dim
    t = vec.reshape([d, d] * n)
    rows = t.transpose(list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2)))
    return rows.reshape(d**n, d**n)


def state_from_dense(
    vec: np.ndarray,
    n: int,
    d: int,
    rel_cutoff: float = 1e-12,
    max_bond: int | None = None,
) -> MPS:
    """Exact-by-default OBC MPS from a dense vector via successive SVDs."""
    vec = np.asarray(vec, dtype=complex).reshape(-1)
    if vec.size != d**n:
        raise StructuralError(f"vector of size {vec.size} is not {d}^{n}")
    arrays = []
    carry = vec.reshape(1, -1)
    for _ in range(n - 1):
        dl = carry.shape[0]
        m = carry.reshape(dl * d, -1)
        t = Tensor(m, ("r", "c"))
        res = svd_truncate(t, ["r"], ["c"], max_rank=max_bond, rel_cutoff=rel_cutoff)
        k = len(res.s)
        arrays.append(res.u.data.reshape(dl, d, k).transpose(0, 2, 1))
        carry = res.s[:, None] * res.vdag.data
    arrays.append(carry.reshape(carry.shape[0], d, 1).transpose(0, 2, 1))
    return MPS(arrays, "obc")


def from_dense(
    op: np.ndarray,
    n: int,
    d: int,
    rel_cutoff: float = 1e-12,
    max_bond: int | None = None,
) -> MPO:
    """Exact-by-default OBC MPO from a dense operator via successive SVDs."""
    op = np.asarray(op, dtype=complex)
    if op.shape != (d**n, d**n):
        raise StructuralError(f"operator shape {op.shape} is not ({d}^{n}, {d}^{n})")
    t = op.reshape([d] * n + [d] * n)
    perm = [x for i in range(n) for x in (i, n + i)]
    vec = t.transpose(perm).reshape(-1)
    psi = state_from_dense(vec, n, d * d, rel_cutoff=rel_cutoff, max_bond=max_bond)
    return devectorize(psi, d)


# ---------------------------------------------------------------------------
# entanglement diagnostics


def _entropy_bits(s: np.ndarray) -> float:
    p = s**2
    tot = p.sum()
    if tot <= 0:
        return 0.0
    p = p / tot
    p = p[p > 1e-300]
    return float(-(p * np.log2(p)).sum())


def schmidt_values(psi: MPS, cut: int) -> np.ndarray:
    """Schmidt coefficients across link ``cut`` (between site cut-1 and cut)."""
    if psi.boundary != "obc":
        raise StructuralError("Schmidt decomposition requires open boundaries")
    n = psi.n_sites
    if not 1 <= cut <= n - 1:
        raise StructuralError(f"cut must be in 1..{n - 1}")
    work = psi.left_canonicalize()
    arrays = work.arrays
    # sweep right-to-left with SVDs; singular values at link `cut` are the
    # Schmidt coefficients since the left block is left-canonical.
    for i in range(n - 1, cut - 1, -1):
        a = arrays[i]
        t = Tensor(a.transpose(0, 2, 1), ("L", "p", "R"))
        res = svd_truncate(t, ["L"], ["p", "R"])
        if i == cut:
            norm = np.linalg.norm(res.s)
            return res.s / (norm if norm > 0 else 1.0)
        vdag = res.vdag.data  # (bond, p, R)
        arrays[i] = vdag.transpose(0, 2, 1)
        carry = res.u.data * res.s  # (L, bond)
        arrays[i - 1] = np.einsum("LRp,Rb->Lbp", arrays[i - 1], carry)
    raise AssertionError("unreachable")


def schmidt_entropy(psi: MPS, cut: int) -> float:
    """Von Neumann entropy (bits) of the bipartition at ``cut`` (OBC only)."""
    return _entropy_bits(schmidt_values(psi, cut))


def entropy_profile(psi: MPS) -> list[float]:
    """Schmidt entropy (bits) at every interior cut of an OBC state."""
    if psi.boundary != "obc":
        raise StructuralError("Schmidt decomposition requires open boundaries")
    n = psi.n_sites
    work = psi.left_canonicalize()
    arrays = work.arrays
    out: list[float] = []
    for i in range(n - 1, 0, -1):
        a = arrays[i]
        t = Tensor(a.transpose(0, 2, 1), ("L", "p", "R"))
        res = svd_truncate(t, ["L"], ["p", "R"])
        out.append(_entropy_bits(res.s))
        vdag = res.vdag.data
        arrays[i] = vdag.transpose(0, 2, 1)
        carry = res.u.data * res.s
        arrays[i - 1] = np.einsum("LRp,Rb->Lbp", arrays[i - 1], carry)
    return out[::-1]


# ---------------------------------------------------------------------------
# serialization (TNMETRO-NET-1)


def network_to_text(obj: MPO | MPS) -> str:
    """Render a network as TNMETRO-NET-1 structured text.

    Layout: a version line; ``kind``, ``boundary``, ``n``, ``d``, ``bonds``
    header lines; then one ``site`` line per tensor (its shape) followed by
    one text row per leading-axis slice containing "re im" pairs of the
    remaining entries in row-major order.
    """
    kind = "mpo" if isinstance(obj, MatrixProductOperator) else "mps"
    lines = ["TNMETRO-NET-1", f"kind {kind}", f"boundary {obj.boundary}",
             f"n {obj.n_sites}", f"d {obj.phys_dim}",
             "bonds " + " ".join(str(b) for b in obj.bond_dims)]
    for i, a in enumerate(obj.arrays):
        lines.append("site " + str(i) + " " + " ".join(str(s) for s in a.shape))
        flat = a.reshape(a.shape[0], -1)
        for row in flat:
            lines.append(" ".join(f"{z.real:.17e} {z.imag:.17e}" for z in row))
    return "\n".join(lines) + "\n"


def save_network(obj: MPO | MPS, path: str) -> None:
    """Write a network as TNMETRO-NET-1 structured text (see network_to_text)."""
    with open(path, "w") as fh:
        fh.write(network_to_text(obj))


def network_from_text(text: str, origin: str = "<text>") -> MPO | MPS:
    """Parse TNMETRO-NET-1 structured text back into a network."""
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
    path = origin
    if not lines or lines[0] != "TNMETRO-NET-1":
        raise StructuralError(f"{path}: not a TNMETRO-NET-1 file")
    header: dict[str, str] = {}
    idx = 1
    while idx < len(lines) and not lines[idx].startswith("site "):
        key, _, val = lines[idx].partition(" ")
        header[key] = val
        idx += 1
    try:
        kind = header["kind"]
        boundary = header["boundary"]
        n = int(header["n"])
    except KeyError as exc:
        raise StructuralError(f"{path}: missing header field {exc}") from exc
    sites = []
    while idx < len(lines):
        parts = lines[idx].split()
        if parts[0] != "site":
            raise StructuralError(f"{path}: expected a site line, got {lines[idx]!r}")
        shape = tuple(int(x) for x in parts[2:])
        idx += 1
        rows = []
        for _ in range(shape[0]):
            vals = np.array(lines[idx].split(), dtype=float)
            rows.append(vals[0::2] + 1j * vals[1::2])
            idx += 1
        sites.append(np.array(rows).reshape(shape))
    if len(sites) != n:
        raise StructuralError(f"{path}: header says {n} sites, found {len(sites)}")
    if kind == "mpo":
        return MPO(sites, boundary)
    if kind == "mps":
        return MPS(sites, boundary)
    raise StructuralError(f"{path}: unknown network kind {kind!r}")


def load_network(path: str) -> MPO | MPS:
    """Read a network written by :func:`save_network`."""
    with open(path) as fh:
        return network_from_text(fh.read(), origin=str(path))
