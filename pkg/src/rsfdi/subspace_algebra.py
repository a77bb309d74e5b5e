"""Structured closed subspaces.

A StructuredSubspace is a set of whole mode blocks, given per family by an
IndexSet (possibly infinite), plus an orthonormal finite part living in the
truncation window and orthogonal to the selected blocks.  All dense work is in
whitened window coordinates, where the Euclidean product is the state inner
product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import svd

from .config import DEFAULT_TOL
from .errors import RSFDIError
from .spectral_core import RieszSpectralSystem, SpectralVector, Window

# ---------------------------------------------------------------------------
# index sets


@dataclass(frozen=True)
class IndexSet:
    """Subset of {1, 2, ...}: finite members, or everything except finite members."""

    cofinite: bool = False
    members: frozenset = frozenset()

    @staticmethod
    def all() -> "IndexSet":
        return IndexSet(True, frozenset())

    @staticmethod
    def empty() -> "IndexSet":
        return IndexSet(False, frozenset())

    @staticmethod
    def ge(k0: int) -> "IndexSet":
        return IndexSet(True, frozenset(range(1, max(int(k0), 1))))

    @staticmethod
    def finite(ks: Iterable[int]) -> "IndexSet":
        return IndexSet(False, frozenset(int(k) for k in ks))

    @staticmethod
    def cofinite_except(ks: Iterable[int]) -> "IndexSet":
        return IndexSet(True, frozenset(int(k) for k in ks))

    def __contains__(self, k: int) -> bool:
        return (k not in self.members) if self.cofinite else (k in self.members)

    @property
    def is_empty(self) -> bool:
        return not self.cofinite and not self.members

    def union(self, o: "IndexSet") -> "IndexSet":
        if self.cofinite and o.cofinite:
            return IndexSet(True, self.members & o.members)
        if self.cofinite:
            return IndexSet(True, self.members - o.members)
        if o.cofinite:
            return IndexSet(True, o.members - self.members)
        return IndexSet(False, self.members | o.members)

    def complement(self) -> "IndexSet":
        return IndexSet(not self.cofinite, self.members)

    def intersect(self, o: "IndexSet") -> "IndexSet":
        return self.complement().union(o.complement()).complement()

    def minus(self, o: "IndexSet") -> "IndexSet":
        return self.intersect(o.complement())

    def issubset(self, o: "IndexSet") -> bool:
        return self.minus(o).is_empty

    def upto(self, n: int) -> list[int]:
        return [k for k in range(1, n + 1) if k in self]

    def beyond(self, n: int) -> "IndexSet":
        """Part of the set with k > n."""
        return self.intersect(IndexSet.ge(n + 1))

    def describe(self) -> str:
        if self.cofinite:
            if not self.members:
                return "ALL"
            m = sorted(self.members)
            if m == list(range(1, m[-1] + 1)):
                return f"k>={m[-1] + 1}"
            return f"ALL except {m}"
        if not self.members:
            return "none"
        return str(sorted(self.members))

    def to_json(self) -> dict:
        if self.cofinite:
            if not self.members:
                return {"kind": "ALL"}
            m = sorted(self.members)
            if m == list(range(1, m[-1] + 1)):
                return {"kind": "ge", "k0": m[-1] + 1}
            return {"kind": "cofinite", "except": m}
        return {"kind": "finite", "members": sorted(self.members)}

    @staticmethod
    def from_json(d: Mapping) -> "IndexSet":
        kind = d["kind"]
        if kind == "ALL":
            return IndexSet.all()
        if kind == "ge":
            return IndexSet.ge(d["k0"])
        if kind == "cofinite":
            return IndexSet.cofinite_except(d["except"])
        if kind == "finite":
            return IndexSet.finite(d["members"])
        raise RSFDIError("INVALID", f"unknown index set kind {kind!r}")


# ---------------------------------------------------------------------------
# dense helpers


@dataclass
class RankInfo:
    rank: int
    kept_min: float
    dropped_max: float

    @property
    def margin(self) -> float:
        if self.dropped_max == 0.0:
            return np.inf
        return self.kept_min / self.dropped_max

    @property
    def ambiguous(self) -> bool:
        return self.rank > 0 and self.margin < 1e3


def orth(M: np.ndarray, tol: float = DEFAULT_TOL.rank, scale: float | None = None) -> tuple[np.ndarray, RankInfo]:
    """Orthonormal basis of range(M) with a relative singular-value cut."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.size == 0 or M.shape[1] == 0:
        return np.zeros((M.shape[0], 0)), RankInfo(0, np.inf, 0.0)
    U, s, _ = svd(M, full_matrices=False, lapack_driver="gesvd")
    ref = max(s[0] if scale is None else scale, np.finfo(float).tiny)
    r = int(np.sum(s > tol * ref))
    return U[:, :r], RankInfo(r, float(s[r - 1]) if r else np.inf, float(s[r]) if r < s.size else 0.0)


def null(M: np.ndarray, tol: float = DEFAULT_TOL.rank, scale: float | None = None) -> np.ndarray:
    """Null space basis; singular values <= tol * scale count as zero (scale defaults to ||M||)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] == 0:
        return np.zeros((0, 0))
    if M.shape[0] == 0:
        return np.eye(M.shape[1])
    _, s, Vt = svd(M, full_matrices=True, lapack_driver="gesvd")
    ref = s[0] if scale is None else scale
    if ref == 0:
        return np.eye(M.shape[1])
    r = int(np.sum(s > tol * ref))
    return Vt[r:].T.copy()


def dense_intersect(Q1: np.ndarray, Q2: np.ndarray, cos_tol: float = DEFAULT_TOL.cosine) -> np.ndarray:
    """Intersection of two orthonormal bases by principal angles."""
    if Q1.shape[1] == 0 or Q2.shape[1] == 0:
        return np.zeros((Q1.shape[0], 0))
    U, s, _ = svd(Q1.T @ Q2, full_matrices=False)
    k = int(np.sum(s >= 1.0 - cos_tol))
    if k == 0:
        return np.zeros((Q1.shape[0], 0))
    return orth(Q1 @ U[:, :k])[0]


def dense_sum(*Qs: np.ndarray) -> np.ndarray:
    M = np.column_stack([Q for Q in Qs if Q.shape[1]]) if any(Q.shape[1] for Q in Qs) else Qs[0][:, :0]
    return orth(M)[0]


def projector(Q: np.ndarray) -> np.ndarray:
    return Q @ Q.T


def projector_distance(Q1: np.ndarray, Q2: np.ndarray) -> float:
    if Q1.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(projector(Q1) - projector(Q2), 2))


def complement(Q: np.ndarray) -> np.ndarray:
    """Orthonormal basis of range(Q)^perp."""
    if Q.shape[1] == 0:
        return np.eye(Q.shape[0])
    return null(Q.T)


def preimage(A: np.ndarray, Q: np.ndarray, within: np.ndarray | None = None,
             scale: float | None = None) -> np.ndarray:
    """Basis of {x in range(within) : A x in range(Q)}; ``scale`` is the reference operator norm."""
    n = A.shape[1]
    X = np.eye(n) if within is None else within
    R = complement(Q)
    if R.shape[1] == 0:
        return X
    ref = float(np.linalg.norm(A, 2)) if scale is None else scale
    K = null(R.T @ A @ X, scale=max(ref, np.finfo(float).tiny))
    return orth(X @ K)[0] if K.shape[1] else np.zeros((n, 0))


def largest_invariant_in(A: np.ndarray, Q: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Largest A-invariant subspace contained in range(Q): V <- V cap A^{-1} V."""
    V = Q
    ref = max(float(np.linalg.norm(A, 2)) if scale is None else scale, 1e-300)
    for _ in range(Q.shape[1] + 1):
        Vn = preimage(A, V, V, ref)
        if Vn.shape[1] == V.shape[1]:
            return V
        V = Vn
        if V.shape[1] == 0:
            return V
    return V


def krylov_closure(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Smallest A-invariant subspace containing range(Q)."""
    V = orth(Q)[0]
    for _ in range(A.shape[0] + 1):
        Vn = dense_sum(V, A @ V) if V.shape[1] else V
        if Vn.shape[1] == V.shape[1]:
            return V
        V = Vn
    return V


# ---------------------------------------------------------------------------
# structured subspaces


@dataclass(frozen=True)
class StructuredSubspace:
    """Selected whole mode blocks (per family) plus an orthonormal finite part."""

    window: Window
    selections: Mapping = field(default_factory=dict)
    basis: np.ndarray = None
    tail_verified: bool = True
    notes: tuple = ()

    def __post_init__(self):
        sel = {}
        for fam in self.window.families:
            s = self.selections.get(fam.label, IndexSet.empty())
            if fam.count is not None:
                s = s.intersect(IndexSet.finite(range(1, fam.count + 1)))
            if not s.is_empty:
                sel[fam.label] = s
        object.__setattr__(self, "selections", sel)
        B = np.zeros((self.window.n, 0)) if self.basis is None else np.asarray(self.basis, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        object.__setattr__(self, "basis", B)

    # -- construction ------------------------------------------------------
    @staticmethod
    def zero(window: Window) -> "StructuredSubspace":
        return StructuredSubspace(window)

    @staticmethod
    def whole(window: Window) -> "StructuredSubspace":
        return StructuredSubspace(window, {f.label: IndexSet.all() for f in window.families})

    @staticmethod
    def families(window: Window, selections: Mapping) -> "StructuredSubspace":
        return StructuredSubspace(window, dict(selections))

    @staticmethod
    def from_dense(window: Window, Z: np.ndarray, selections: Mapping | None = None,
                   tail_verified: bool = True, notes: Sequence[str] = ()) -> "StructuredSubspace":
        return StructuredSubspace(window, dict(selections or {}), orth(Z)[0], tail_verified,
                                  tuple(notes)).canonical()

    # -- window views ------------------------------------------------------
    def selected_blocks(self) -> list[int]:
        out = []
        for b, (fi, k, _, _) in enumerate(self.window.blocks):
            s = self.selections.get(self.window.families[fi].label)
            if s is not None and k in s:
                out.append(b)
        return out

    def selected_coords(self) -> np.ndarray:
        return self.window.coords_of_blocks(self.selected_blocks())

    def dense_basis(self) -> np.ndarray:
        """Orthonormal basis of the whole subspace inside the window."""
        idx = self.selected_coords()
        E = np.zeros((self.window.n, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        return np.hstack([E, self.basis]) if self.basis.shape[1] else E

    def beyond(self) -> dict:
        """Selections restricted to modes outside the window (only infinite families)."""
        out = {}
        for fam in self.window.families:
            s = self.selections.get(fam.label)
            if s is None:
                continue
            b = s.beyond(fam.n_in_window(self.window.n_trunc))
            if not b.is_empty:
                out[fam.label] = b
        return out

    @property
    def dim_window(self) -> int:
        return int(self.selected_coords().size + self.basis.shape[1])

    @property
    def is_finite(self) -> bool:
        return not self.beyond()

    def canonical(self) -> "StructuredSubspace":
        """Move whole blocks contained in the finite part into the selections."""
        w = self.window
        sel = {k: v for k, v in self.selections.items()}
        B = self.basis
        if B.shape[1]:
            Q = self.dense_basis()
            P = projector(Q)
            add: dict[str, set] = {}
            sel_blocks = set(self.selected_blocks())
            for b in range(len(w.blocks)):
                if b in sel_blocks:
                    continue
                sl = w.block_slice(b)
                d = sl.stop - sl.start
                if B.shape[1] < d:
                    continue
                if np.max(np.abs(P[sl, sl] - np.eye(d))) <= 1e-9:
                    lab, k = w.block_label(b)
                    add.setdefault(lab, set()).add(k)
            for lab, ks in add.items():
                sel[lab] = sel.get(lab, IndexSet.empty()).union(IndexSet.finite(ks))
        tmp = StructuredSubspace(w, sel, None, self.tail_verified, self.notes)
        idx = tmp.selected_coords()
        if B.shape[1]:
            B = B.copy()
            B[idx, :] = 0.0
            B = orth(B, scale=1.0)[0]
        return StructuredSubspace(w, sel, B, self.tail_verified, self.notes)

    def with_flags(self, tail_verified: bool | None = None, notes: Sequence[str] = ()) -> "StructuredSubspace":
        tv = self.tail_verified if tail_verified is None else tail_verified
        return StructuredSubspace(self.window, self.selections, self.basis, tv, self.notes + tuple(notes))

    def contains_vector(self, v, tol: float = 1e-8) -> bool:
        z = self.window.coords(v) if isinstance(v, SpectralVector) else np.asarray(v, dtype=float)
        if isinstance(v, SpectralVector):
            for t in v.tails:
                fam = self.window.families[[f.label for f in self.window.families].index(t.family)]
                tailpart = IndexSet.ge(max(t.k0, fam.n_in_window(self.window.n_trunc) + 1))
                if fam.count is None and not tailpart.issubset(self.selections.get(t.family, IndexSet.empty())):
                    return False
        Q = self.dense_basis()
        r = z - Q @ (Q.T @ z)
        return float(np.linalg.norm(r)) <= tol * max(1.0, float(np.linalg.norm(z)))

    def describe(self) -> str:
        parts = [f"{lab}: {s.describe()}" for lab, s in sorted(self.selections.items())]
        if self.basis.shape[1]:
            parts.append(f"finite part dim {self.basis.shape[1]}")
        if not self.tail_verified:
            parts.append("tail UNVERIFIED")
        return "{" + "; ".join(parts) + "}" if parts else "{0}"

    def to_json(self) -> dict:
        return {"n_trunc": self.window.n_trunc,
                "selections": {lab: s.to_json() for lab, s in sorted(self.selections.items())},
                "finite_part": self.basis.T.tolist(),
                "finite_dim": int(self.basis.shape[1]),
                "tail_verified": self.tail_verified,
                "notes": list(self.notes),
                "summary": self.describe()}


def _check(S1: StructuredSubspace, S2: StructuredSubspace):
    if S1.window.n_trunc != S2.window.n_trunc or S1.window.n != S2.window.n:
        raise RSFDIError("INCOMPATIBLE_TRUNCATION",
                         f"subspaces built at truncation {S1.window.n_trunc} and {S2.window.n_trunc}")


def span(window: Window, vectors: Sequence, tol: float = DEFAULT_TOL.rank) -> StructuredSubspace:
    """Span of vectors; tails are truncated to the window and flagged in notes."""
    if not vectors:
        return StructuredSubspace.zero(window)
    cols, notes = [], []
    for v in vectors:
        if isinstance(v, SpectralVector):
            if v.has_tail:
                notes.append("tail residue beyond window dropped: " + ", ".join(
                    f"{t.family} c/k^{t.p:g} from k={max(t.k0, window.n_trunc + 1)}" for t in v.tails))
            cols.append(window.coords(v))
        else:
            cols.append(np.asarray(v, dtype=float))
    Q, info = orth(np.column_stack(cols), tol)
    if info.ambiguous:
        notes.append(f"rank margin {info.margin:.3g} below 1e3")
    return StructuredSubspace(window, {}, Q, True, tuple(notes)).canonical()


def subspace_sum(S1: StructuredSubspace, S2: StructuredSubspace) -> StructuredSubspace:
    _check(S1, S2)
    sel = dict(S1.selections)
    for lab, s in S2.selections.items():
        sel[lab] = sel.get(lab, IndexSet.empty()).union(s)
    B = np.hstack([S1.basis, S2.basis])
    out = StructuredSubspace(S1.window, sel, B if B.shape[1] else None,
                             S1.tail_verified and S2.tail_verified, S1.notes + S2.notes)
    idx = out.selected_coords()
    B = B.copy()
    B[idx, :] = 0.0
    return StructuredSubspace(S1.window, sel, orth(B, scale=1.0)[0], out.tail_verified, out.notes).canonical()


def intersect(S1: StructuredSubspace, S2: StructuredSubspace) -> StructuredSubspace:
    _check(S1, S2)
    Z = dense_intersect(S1.dense_basis(), S2.dense_basis())
    sel = {}
    for lab in set(S1.selections) & set(S2.selections):
        fam = next(f for f in S1.window.families if f.label == lab)
        b = S1.selections[lab].intersect(S2.selections[lab]).beyond(fam.n_in_window(S1.window.n_trunc))
        if not b.is_empty:
            sel[lab] = b
    out = StructuredSubspace(S1.window, sel, Z, S1.tail_verified and S2.tail_verified, S1.notes + S2.notes)
    idx = out.selected_coords()
    Z = Z.copy()
    Z[idx, :] = 0.0
    return StructuredSubspace(S1.window, sel, orth(Z, scale=1.0)[0], out.tail_verified, out.notes).canonical()


def contains(S1: StructuredSubspace, S2: StructuredSubspace, tol: float = 1e-8) -> bool:
    """S2 subset of S1."""
    _check(S1, S2)
    for lab, b in S2.beyond().items():
        if not b.issubset(S1.selections.get(lab, IndexSet.empty())):
            return False
    Q1, Q2 = S1.dense_basis(), S2.dense_basis()
    if Q2.shape[1] == 0:
        return True
    return float(np.linalg.norm(Q2 - Q1 @ (Q1.T @ Q2), 2)) <= tol


def dim_finite_part(S: StructuredSubspace) -> int:
    return int(S.basis.shape[1])


def distance(S1: StructuredSubspace, S2: StructuredSubspace) -> float:
    """Window projector distance; 1 when the out-of-window selections differ."""
    _check(S1, S2)
    b1, b2 = S1.beyond(), S2.beyond()
    if b1 != b2:
        return 1.0
    return projector_distance(S1.dense_basis(), S2.dense_basis())


def orth_complement_within(S: StructuredSubspace, ambient: StructuredSubspace | None = None) -> StructuredSubspace:
    """ambient cap S^perp, respecting family structure."""
    amb = StructuredSubspace.whole(S.window) if ambient is None else ambient
    _check(S, amb)
    Qperp = complement(S.dense_basis())
    Z = dense_intersect(amb.dense_basis(), Qperp)
    sel = {}
    for lab, a in amb.beyond().items():
        b = a.minus(S.selections.get(lab, IndexSet.empty()))
        if not b.is_empty:
            sel[lab] = b
    Z = Z.copy()
    out = StructuredSubspace(S.window, sel, None, S.tail_verified and amb.tail_verified)
    Z[out.selected_coords(), :] = 0.0
    return StructuredSubspace(S.window, sel, orth(Z, scale=1.0)[0], out.tail_verified).canonical()


def apply_dense(M: np.ndarray, S: StructuredSubspace) -> np.ndarray:
    """M applied to the window basis of S."""
    return M @ S.dense_basis()


# ---------------------------------------------------------------------------
# output kernels


@dataclass(frozen=True)
class KernelHandle:
    """Implicit ker of selected output rows; never materialized."""

    sys: RieszSpectralSystem
    rows: tuple
    n_trunc: int

    @property
    def window(self) -> Window:
        return self.sys.window(self.n_trunc)

    def matrix(self) -> np.ndarray:
        w = self.window
        if not self.rows:
            return np.zeros((0, w.n))
        return np.vstack([w.coords(self.sys.C[j]) for j in self.rows])

    def families_inside(self) -> list[str]:
        """Families whose every mode is annihilated by all selected rows (declared facts)."""
        out = []
        for fam in self.sys.families:
            if all((j, fam.label) in self.sys.orthogonality_facts for j in self.rows):
                out.append(fam.label)
        return out

    def contains(self, v, tol: float = DEFAULT_TOL.ip) -> bool:
        from .spectral_core import inner_product
        if isinstance(v, SpectralVector):
            vals = [inner_product(self.sys.C[j], v, self.sys) for j in self.rows]
            ref = max(1.0, np.sqrt(max(inner_product(v, v, self.sys), 0.0)))
        else:
            vals = self.matrix() @ np.asarray(v, dtype=float)
            ref = max(1.0, float(np.linalg.norm(v)))
        return all(abs(x) <= tol * ref for x in np.atleast_1d(vals))

    def intersect_dense(self, Q: np.ndarray) -> np.ndarray:
        """range(Q) cap ker, by constraint stacking."""
        if Q.shape[1] == 0 or not self.rows:
            return Q
        Cm = self.matrix()
        K = null(Cm @ Q, scale=max(float(np.linalg.norm(Cm, 2)), np.finfo(float).tiny))
        return orth(Q @ K)[0] if K.shape[1] else Q[:, :0]

    def intersect(self, S: StructuredSubspace) -> StructuredSubspace:
        w = self.window
        inside = set(self.families_inside())
        sel = {lab: s for lab, s in S.beyond().items() if lab in inside}
        Z = self.intersect_dense(S.dense_basis())
        out = StructuredSubspace(w, sel, None, S.tail_verified, S.notes)
        Z = Z.copy()
        Z[out.selected_coords(), :] = 0.0
        return StructuredSubspace(w, sel, orth(Z, scale=1.0)[0], S.tail_verified, S.notes).canonical()


def kernel_of_output(sys: RieszSpectralSystem, rows: Sequence[int] | None = None,
                     n_trunc: int = 200) -> KernelHandle:
    rows = tuple(range(sys.q)) if rows is None else tuple(int(r) for r in rows)
    for r in rows:
        if not 0 <= r < sys.q:
            raise RSFDIError("INVALID", f"output row {r + 1} does not exist")
    return KernelHandle(sys, rows, n_trunc)


# ---------------------------------------------------------------------------
# quotients


@dataclass(frozen=True)
class QuotientMap:
    """Canonical projection X -> X/S in window coordinates: P = R^T."""

    window: Window
    kernel: StructuredSubspace
    R: np.ndarray
    family_complement: Mapping

    @property
    def dim(self) -> int:
        return int(self.R.shape[1])

    @property
    def P(self) -> np.ndarray:
        return self.R.T

    def apply(self, v) -> np.ndarray:
        z = self.window.coords(v) if isinstance(v, SpectralVector) else np.asarray(v, dtype=float)
        return self.R.T @ z

    def embed(self, w: np.ndarray) -> np.ndarray:
        return self.R @ w

    def coordinate_labels(self) -> list:
        """(family, k) for quotient coordinates that are whole unselected blocks, else None."""
        out = []
        for j in range(self.R.shape[1]):
            col = self.R[:, j]
            i = int(np.argmax(np.abs(col)))
            b = int(self.window.coord_block[i])
            sl = self.window.block_slice(b)
            out.append(self.window.block_label(b) if np.linalg.norm(col[sl]) > 1 - 1e-12 else None)
        return out

    def to_json(self) -> dict:
        return {"dim": self.dim, "kernel": self.kernel.to_json(),
                "family_complement": {k: v.to_json() for k, v in self.family_complement.items()}}


def quotient_map(sys_or_window, S: StructuredSubspace) -> QuotientMap:
    """Projection with kernel S; unselected whole blocks become unit quotient coordinates."""
    w = S.window
    sel_blocks = set(S.selected_blocks())
    free = [b for b in range(len(w.blocks)) if b not in sel_blocks]
    idx = w.coords_of_blocks(free)
    Rf = np.zeros((w.n, 0))
    if idx.size:
        # complement of the finite part inside the unselected coordinates
        Bf = S.basis[idx, :]
        E = np.eye(idx.size)
        Cf = complement(orth(Bf, scale=1.0)[0]) if Bf.shape[1] else E
        Rf = np.zeros((w.n, Cf.shape[1]))
        Rf[idx, :] = Cf
    # prefer unit columns where a block is untouched by the finite part
    touched = set()
    for b in free:
        sl = w.block_slice(b)
        if S.basis.shape[1] and np.max(np.abs(S.basis[sl, :])) > 0:
            touched.add(b)
    untouched = [b for b in free if b not in touched]
    if untouched:
        ui = w.coords_of_blocks(untouched)
        ti = w.coords_of_blocks(sorted(touched))
        E = np.zeros((w.n, ui.size))
        E[ui, np.arange(ui.size)] = 1.0
        if ti.size:
            Bt = S.basis[ti, :]
            Ct = complement(orth(Bt, scale=1.0)[0]) if Bt.shape[1] else np.eye(ti.size)
            T = np.zeros((w.n, Ct.shape[1]))
            T[ti, :] = Ct
            Rf = np.hstack([E, T])
        else:
            Rf = E
        order = np.argsort([int(np.argmax(np.abs(Rf[:, j]) > 0)) for j in range(Rf.shape[1])], kind="stable")
        Rf = Rf[:, order]
    fc = {}
    for fam in w.families:
        s = IndexSet.all() if fam.count is None else IndexSet.finite(range(1, fam.count + 1))
        c = s.minus(S.selections.get(fam.label, IndexSet.empty()))
        if not c.is_empty:
            fc[fam.label] = c
    return QuotientMap(w, S, Rf, fc)
