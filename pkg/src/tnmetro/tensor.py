"""Dense complex tensors with named legs, plus the spectral solvers used everywhere else.

A :class:`Tensor` is a thin wrapper around a numpy array that names each axis.
Contraction of small networks goes through :func:`contract`, which accepts
explicit leg pairings and picks a pairwise order greedily by intermediate size.
The module also provides truncated SVD, a Moore-Penrose pseudo-inverse with a
relative cutoff, a leading-eigenpair solver returning bilinearly normalized
left/right vectors, and a generalized smallest-eigenpair solver.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg


class StructuralError(ValueError):
    """A network or matrix is malformed (mismatched legs, empty data, ...)."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance.

    Carries the last residual (if available) in ``residual``.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DegenerateEigenvalueError(ConvergenceError):
    """The leading eigenvalue is degenerate within tolerance, so the
    one-dimensional leading eigenspace assumption does not hold."""


class Tensor:
    """Dense complex array with one string label per axis.

    Labels are unique within a tensor. ``data`` is stored row-major in the
    order of ``labels``.
    """

    __slots__ = ("data", "labels")

    def __init__(self, data: np.ndarray, labels: Sequence[str]):
        data = np.asarray(data, dtype=complex)
        labels = tuple(labels)
        if data.ndim != len(labels):
            raise StructuralError(
                f"tensor has {data.ndim} axes but {len(labels)} leg labels"
            )
        if len(set(labels)) != len(labels):
            raise StructuralError(f"duplicate leg labels in {labels}")
        self.data = data
        self.labels = labels

    @property
    def legs(self) -> tuple[tuple[str, int], ...]:
        return tuple(zip(self.labels, self.data.shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def axis(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise StructuralError(f"no leg {label!r} in tensor with legs {self.labels}")

    def dim(self, label: str) -> int:
        return self.data.shape[self.axis(label)]

    def transpose(self, labels: Sequence[str]) -> "Tensor":
        """Return a view/copy with axes reordered to ``labels``."""
        perm = [self.axis(l) for l in labels]
        if sorted(perm) != list(range(self.data.ndim)):
            raise StructuralError(
                f"transpose labels {tuple(labels)} do not match legs {self.labels}"
            )
        return Tensor(self.data.transpose(perm), labels)

    def relabel(self, mapping: dict[str, str]) -> "Tensor":
        return Tensor(self.data, tuple(mapping.get(l, l) for l in self.labels))

    def __repr__(self) -> str:
        legs = ", ".join(f"{l}:{d}" for l, d in self.legs)
        return f"Tensor({legs})"


@dataclasses.dataclass
class SvdResult:
    """Truncated SVD of a tensor split into row and column leg groups.

    ``s`` is sorted descending. ``truncated_weight`` is the sum of squared
    discarded singular values.
    """

    u: Tensor
    s: np.ndarray
    vdag: Tensor
    truncated_weight: float


def _as_matrix(m) -> np.ndarray:
    if isinstance(m, Tensor):
        m = m.data
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2:
        raise StructuralError(f"expected a matrix, got shape {m.shape}")
    return m


def contract(
    tensors: Sequence[Tensor],
    pairings: Sequence[tuple[tuple[int, str], tuple[int, str]]],
    output_legs: Sequence[str] | None = None,
) -> Tensor:
    """Contract a small network of named-leg tensors.

    ``pairings`` is a list of ``((i, label_a), (j, label_b))`` entries, each
    joining leg ``label_a`` of ``tensors[i]`` with leg ``label_b`` of
    ``tensors[j]``. Every leg not mentioned in a pairing survives into the
    output; ``output_legs`` fixes their order (default: tensor order, then leg
    order). Output labels must be unique across all tensors.

    The pairwise contraction order is chosen greedily by smallest intermediate
    size; the value never depends on the order.
    """
    # Work on id-tagged legs so equal labels on different tensors stay distinct.
    nodes: dict[int, tuple[np.ndarray, list[tuple[int, str]]]] = {}
    for i, t in enumerate(tensors):
        if not isinstance(t, Tensor):
            raise StructuralError(f"tensors[{i}] is not a Tensor")
        nodes[i] = (t.data, [(i, l) for l in t.labels])

    def leg_dim(leg: tuple[int, str]) -> int:
        i, label = leg
        return tensors[i].dim(label)

    pending: list[tuple[tuple[int, str], tuple[int, str]]] = []
    seen: set[tuple[int, str]] = set()
    for a, b in pairings:
        a, b = (int(a[0]), a[1]), (int(b[0]), b[1])
        for leg in (a, b):
            if leg[0] not in nodes:
                raise StructuralError(f"pairing references missing tensor {leg[0]}")
            tensors[leg[0]].axis(leg[1])  # raises if label unknown
            if leg in seen:
                raise StructuralError(f"leg {leg} appears in more than one pairing")
            seen.add(leg)
        if leg_dim(a) != leg_dim(b):
            raise StructuralError(
                f"dimension mismatch contracting leg {a} (dim {leg_dim(a)}) "
                f"with leg {b} (dim {leg_dim(b)})"
            )
        pending.append((a, b))

    # owner map: which node currently holds a tagged leg
    owner = {leg: i for i, (_, legs) in nodes.items() for leg in legs}

    def trace_self(node_id: int, pairs: list[tuple[tuple[int, str], tuple[int, str]]]):
        data, legs = nodes[node_id]
        for a, b in pairs:
            ia, ib = legs.index(a), legs.index(b)
            data = np.trace(data, axis1=ia, axis2=ib)
            legs = [l for k, l in enumerate(legs) if k not in (ia, ib)]
        nodes[node_id] = (data, legs)

    while pending:
        # group pending pairings by the (unordered) node pair they join
        groups: dict[frozenset[int], list] = {}
        for a, b in pending:
            groups.setdefault(frozenset((owner[a], owner[b])), []).append((a, b))

        # self-contractions first: they only shrink tensors
        self_groups = [k for k in groups if len(k) == 1]
        if self_groups:
            (nid,) = self_groups[0]
            trace_self(nid, groups[frozenset((nid,))])
            pending = [p for p in pending if p not in groups[frozenset((nid,))]]
            continue

        # greedy: contract the node pair with the smallest resulting tensor
        def result_size(key: frozenset[int]) -> int:
            i, j = tuple(key)
            joined = {leg for pair in groups[key] for leg in pair}
            size = 1
            for nid in (i, j):
                for leg in nodes[nid][1]:
                    if leg not in joined:
                        size *= leg_dim(leg)
            return size

        best = min(sorted(groups, key=lambda k: tuple(sorted(k))), key=result_size)
        i, j = tuple(sorted(best))
        pairs = groups[best]
        data_i, legs_i = nodes[i]
        data_j, legs_j = nodes[j]
        axes_i, axes_j = [], []
        for a, b in pairs:
            if owner[a] == j:
                a, b = b, a
            axes_i.append(legs_i.index(a))
            axes_j.append(legs_j.index(b))
        new_data = np.tensordot(data_i, data_j, axes=(axes_i, axes_j))
        new_legs = [l for k, l in enumerate(legs_i) if k not in axes_i] + [
            l for k, l in enumerate(legs_j) if k not in axes_j
        ]
        nodes[i] = (new_data, new_legs)
        del nodes[j]
        for leg in new_legs:
            owner[leg] = i
        pending = [p for p in pending if p not in pairs]

    # outer product of whatever is left, in node-id order
    node_ids = sorted(nodes)
    data, legs = nodes[node_ids[0]]
    for nid in node_ids[1:]:
        d2, l2 = nodes[nid]
        data = np.tensordot(data, d2, axes=0)
        legs = legs + l2

    labels = [label for (_, label) in legs]
    if len(set(labels)) != len(labels):
        dup = sorted({l for l in labels if labels.count(l) > 1})
        raise StructuralError(f"duplicate output leg labels {dup}")
    out = Tensor(data, labels)
    if output_legs is not None:
        out = out.transpose(list(output_legs))
    return out


def svd_truncate(
    t: Tensor,
    row_legs: Sequence[str],
    col_legs: Sequence[str],
    max_rank: int | None = None,
    rel_cutoff: float = 0.0,
    bond_label: str = "bond",
) -> SvdResult:
    """SVD of ``t`` split into (row_legs) x (col_legs), truncated.

    Kept rank = min(max_rank, number of singular values >= rel_cutoff * s1),
    and always at least 1. ``u`` carries ``row_legs + (bond_label,)``, ``vdag``
    carries ``(bond_label,) + col_legs``.
    """
    row_legs, col_legs = list(row_legs), list(col_legs)
    if sorted(row_legs + col_legs) != sorted(t.labels):
        raise StructuralError(
            f"row {row_legs} + col {col_legs} must partition legs {t.labels}"
        )
    if t.data.size == 0:
        raise StructuralError("cannot SVD an empty tensor")
    tt = t.transpose(row_legs + col_legs)
    row_shape = tt.data.shape[: len(row_legs)]
    col_shape = tt.data.shape[len(row_legs) :]
    m = tt.data.reshape(int(np.prod(row_shape, dtype=int)), -1)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    if s[0] > 0:
        keep = int(np.count_nonzero(s >= rel_cutoff * s[0]))
    else:
        keep = 1
    if max_rank is not None:
        keep = min(keep, int(max_rank))
    keep = max(keep, 1)
    truncated_weight = float(np.sum(s[keep:] ** 2))
    u, s, vh = u[:, :keep], s[:keep], vh[:keep, :]
    u_t = Tensor(u.reshape(*row_shape, keep), row_legs + [bond_label])
    v_t = Tensor(vh.reshape(keep, *col_shape), [bond_label] + col_legs)
    return SvdResult(u=u_t, s=s, vdag=v_t, truncated_weight=truncated_weight)


def pseudo_inverse(m, kappa: float = 0.0, hermitian: bool = False) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with singular values below
    ``kappa * s1`` treated as exactly zero.

    Accepts a 2-leg Tensor or an ndarray; returns an ndarray. An all-zero
    matrix pseudo-inverts to the zero matrix.
    """
    a = _as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise StructuralError("matrix contains non-finite entries")
    if hermitian:
        a = (a + a.conj().T) / 2
        w, v = np.linalg.eigh(a)
        s1 = float(np.max(np.abs(w), initial=0.0))
        if s1 == 0.0:
            return np.zeros_like(a)
        inv = np.where(np.abs(w) >= kappa * s1, 1.0, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            winv = np.where(inv > 0, 1.0 / np.where(w == 0, 1.0, w), 0.0)
        return (v * winv) @ v.conj().T
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    s1 = float(s[0]) if s.size else 0.0
    if s1 == 0.0:
        return np.zeros_like(a.T)
    sinv = np.where(s >= kappa * s1, np.divide(1.0, s, where=s > 0), 0.0)
    sinv[s == 0] = 0.0
    return (vh.conj().T * sinv) @ u.conj().T


def _pick_leading(w: np.ndarray, tol: float) -> int:
    """Index of the leading eigenvalue in ``w``.

    A modulus tie between exactly two complex-conjugate partners is resolved
    deterministically to the positive-imaginary member; any other modulus tie
    within ``tol`` relative raises :class:`DegenerateEigenvalueError`.
    """
    mods = np.abs(w)
    top = float(np.max(mods))
    tied = np.flatnonzero(mods >= top - max(tol, 1e-12) * max(top, 1e-300))
    if len(tied) == 1:
        return int(tied[0])
    if len(tied) == 2:
        a, b = w[tied[0]], w[tied[1]]
        if abs(a - np.conj(b)) <= max(tol, 1e-12) * max(top, 1e-300) and abs(a.imag) > 0:
            return int(tied[0] if a.imag > 0 else tied[1])
    raise DegenerateEigenvalueError(
        f"leading eigenvalue modulus {top:.6g} is {len(tied)}-fold degenerate",
        residual=float(np.ptp(mods[tied])),
    )


def _leading_pair(mat: np.ndarray, tol: float) -> tuple[complex, np.ndarray, np.ndarray]:
    """Leading eigenvalue with right and left eigenvectors of a dense matrix."""
    n = mat.shape[0]
    if n <= 1024:
        w, vr = np.linalg.eig(mat)
        idx = _pick_leading(w, tol)
        lam = w[idx]
        r = vr[:, idx]
        wl, vl = np.linalg.eig(mat.T)
        il = int(np.argmin(np.abs(wl - lam)))
        l = vl[:, il]
        return lam, r, l
    # large: Arnoldi on the matrix and its transpose
    try:
        w, vr = scipy.sparse.linalg.eigs(mat, k=3, which="LM")
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        raise ConvergenceError(f"Arnoldi iteration did not converge: {exc}") from exc
    idx = _pick_leading(w, tol)
    lam = w[idx]
    r = vr[:, idx]
    wl, vl = scipy.sparse.linalg.eigs(mat.T, k=3, which="LM")
    il = int(np.argmin(np.abs(wl - lam)))
    l = vl[:, il]
    return lam, r, l


def eig_leading(
    apply: Callable[[np.ndarray], np.ndarray] | np.ndarray,
    dim: int | None = None,
    tol: float = 1e-10,
) -> tuple[complex, np.ndarray, np.ndarray]:
    """Leading (largest-modulus) eigenvalue with right and left eigenvectors.

    ``apply`` may be a dense matrix or a callable ``v -> M v``; callables are
    materialized column by column (networks here are small enough). The
    returned vectors satisfy the bilinear normalization ``l @ r = 1`` (no
    conjugation). A modulus tie between a complex-conjugate pair is resolved
    to the positive-imaginary member; any other tie within ``tol`` relative
    raises :class:`DegenerateEigenvalueError`. :class:`ConvergenceError` is
    raised when the residual exceeds tolerance.
    """
    if callable(apply) and not isinstance(apply, np.ndarray):
        if dim is None:
            raise StructuralError("dim is required when apply is a callable")
        mat = np.empty((dim, dim), dtype=complex)
        eye = np.eye(dim)
        for j in range(dim):
            mat[:, j] = apply(eye[:, j])
    else:
        mat = _as_matrix(apply)
    lam, r, l = _leading_pair(mat, tol)
    overlap = l @ r
    if abs(overlap) < 1e-14 * np.linalg.norm(l) * np.linalg.norm(r):
        raise ConvergenceError(
            "left/right leading eigenvectors are bilinearly orthogonal "
            "(defective leading eigenvalue)"
        )
    l = l / overlap
    residual = float(np.linalg.norm(mat @ r - lam * r))
    if residual > max(tol, 1e-12) * max(abs(lam), 1e-300) * 100:
        raise ConvergenceError(
            f"eigenpair residual {residual:.3g} exceeds tolerance", residual=residual
        )
    return lam, r, l


def generalized_eig_smallest(
    f,
    n=None,
    dim: int | None = None,
    tol: float = 1e-10,
    kappa: float = 1e-12,
) -> tuple[float, np.ndarray]:
    """Smallest eigenpair of ``F x = value N x`` restricted off N's kernel.

    ``F`` is Hermitized, ``N`` (identity when omitted) is Hermitized and
    eigendecomposed; directions with eigenvalue below ``kappa * max |w|`` are
    projected out. The returned vector is N-normalized: ``x' N x = 1``.
    """
    fm = _as_matrix(f)
    fm = (fm + fm.conj().T) / 2
    if n is None:
        w, vec = np.linalg.eigh(fm)
        return float(w[0]), vec[:, 0]
    nm = _as_matrix(n)
    nm = (nm + nm.conj().T) / 2
    w, u = np.linalg.eigh(nm)
    wmax = float(np.max(np.abs(w), initial=0.0))
    if wmax == 0.0:
        raise StructuralError("normalization matrix is numerically zero")
    keep = w >= kappa * wmax
    if not np.any(keep):
        raise StructuralError("normalization matrix has no retained directions")
    u = u[:, keep]
    scale = 1.0 / np.sqrt(w[keep])
    b = (u * scale).conj().T @ fm @ (u * scale)
    b = (b + b.conj().T) / 2
    vals, vecs = np.linalg.eigh(b)
    x = (u * scale) @ vecs[:, 0]
    return float(vals[0]), x
