"""Invariant subspaces, friends and unobservability subspaces.

Window computations are exact block-diagonal linear algebra in whitened
coordinates.  Modes beyond the window are decided from what is known about
the output functionals there (see RieszSpectralSystem.output_tail_status).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import eig, schur

from .config import DEFAULT_TOL
from .errors import RSFDIError
from .spectral_core import RieszSpectralSystem, SpectralVector, Window, inner_product
from .subspace_algebra import (IndexSet, StructuredSubspace, complement, contains, dense_intersect,
                               dense_sum, kernel_of_output, krylov_closure, largest_invariant_in, null,
                               orth, orth_complement_within, projector_distance, subspace_sum)

# ---------------------------------------------------------------------------
# helpers


def _row_tail_status(sys: RieszSpectralSystem, weights: np.ndarray, label: str, n_trunc: int) -> str:
    """Tail status of the functional sum_j weights[j] c_j on family ``label``."""
    st = [sys.output_tail_status(j, label, n_trunc) for j in range(sys.q) if abs(weights[j]) > 1e-14]
    if all(s == "ZERO" for s in st):
        return "ZERO"
    live = [s for s in st if s != "ZERO"]
    if len(live) == 1 and live[0] == "NONZERO":
        return "NONZERO"
    return "UNKNOWN"


def _family_status(sys: RieszSpectralSystem, H: np.ndarray, label: str, n_trunc: int) -> str:
    """Combined status of all rows of H on a family: ZERO, NONZERO or UNKNOWN."""
    st = [_row_tail_status(sys, h, label, n_trunc) for h in np.atleast_2d(H)]
    if not st or all(s == "ZERO" for s in st):
        return "ZERO"
    if any(s == "NONZERO" for s in st):
        return "NONZERO"
    return "UNKNOWN"


def _unit_cols(n: int, idx: np.ndarray) -> np.ndarray:
    E = np.zeros((n, idx.size))
    E[idx, np.arange(idx.size)] = 1.0
    return E


def _rowspace_complement(Q: np.ndarray, q: int) -> np.ndarray:
    """Rows spanning range(Q)^perp in R^q; Gram-Schmidt over the identity keeps e_j when possible."""
    P = np.eye(q) - (Q @ Q.T if Q.shape[1] else 0.0)
    rows = []
    for j in range(q):
        v = P[:, j].copy()
        for r in rows:
            v -= (r @ v) * r
        nv = np.linalg.norm(v)
        if nv > 1e-9:
            rows.append(v / nv)
    H = np.array(rows) if rows else np.zeros((0, q))
    for r in range(H.shape[0]):
        i = int(np.argmax(np.abs(H[r])))
        if H[r, i] < 0:
            H[r] = -H[r]
    H[np.abs(H) < 1e-15] = 0.0
    return H


@dataclass
class _Invariant:
    subspace: StructuredSubspace
    coupled: np.ndarray
    coupled_part: np.ndarray


def _largest_invariant_in_kernel(sys: RieszSpectralSystem, n_trunc: int, H: np.ndarray,
                                 D: np.ndarray | None = None, tol=DEFAULT_TOL) -> _Invariant:
    """Largest (A+DC)-invariant subspace inside ker(HC), window plus tails.

    (A+DC) is block diagonal between the coupled block (modes receiving D or
    feeding an active D column) and the rest, where it equals A.  The rest is
    handled eigenvalue group by eigenvalue group.
    """
    w = sys.window(n_trunc)
    C = np.vstack([w.coords(c) for c in sys.C]) if sys.q else np.zeros((0, w.n))
    H = np.atleast_2d(H) if np.size(H) else np.zeros((0, sys.q))
    K = H @ C
    A = w.A
    notes: list[str] = []
    active = [] if D is None else [j for j in range(sys.q) if np.max(np.abs(D[:, j]), initial=0.0) > 0]
    coupled_blocks: set[int] = set()
    if active:
        recv = np.nonzero(np.max(np.abs(D[:, active]), axis=1) > 0)[0]
        send = np.nonzero(np.max(np.abs(C[active, :]), axis=0) > 0)[0]
        coupled_blocks = {int(w.coord_block[i]) for i in np.r_[recv, send]}
        # invariant subspaces only split along disjoint spectra: absorb uncoupled
        # groups whose eigenvalue meets the coupled spectrum
        cidx = w.coords_of_blocks(sorted(coupled_blocks))
        ev = np.linalg.eigvals((A + D @ C)[np.ix_(cidx, cidx)])
        for g in w.eigen_groups(tol.eig):
            lam = w.eigenvalues[g[0]]
            if any(b not in coupled_blocks for b in g) and np.any(
                    np.abs(ev - lam) <= 1e-7 * max(1.0, abs(lam))):
                coupled_blocks.update(g)
    parts = []
    simple_set = w.simple_blocks(tol.eig)
    anorm = max(float(np.abs(w.eigenvalues).max(initial=0.0)) + 1.0, 1.0)
    # one scale for every row: H has orthonormal rows, so ||HC|| <= ||C||
    cnorm = max(float(np.linalg.norm(C, 2)) if C.size else 0.0, np.finfo(float).tiny)
    kref = np.full(K.shape[0], cnorm)

    # uncoupled modes, group by group
    for g in w.eigen_groups(tol.eig):
        g = [b for b in g if b not in coupled_blocks]
        if not g:
            continue
        idx = w.coords_of_blocks(g)
        Kg = K[:, idx]
        simple = len(g) == 1 and g[0] in simple_set
        if K.shape[0] == 0 or np.all(np.abs(Kg) <= tol.ip * kref[:, None]):
            parts.append(_unit_cols(w.n, idx))
            continue
        if simple:
            continue
        Ag = A[np.ix_(idx, idx)]
        V = largest_invariant_in(Ag, null(Kg / kref[:, None], tol.rank, scale=1.0), anorm)
        if V.shape[1]:
            Z = np.zeros((w.n, V.shape[1]))
            Z[idx, :] = V
            parts.append(Z)

    coupled_part = np.zeros((w.n, 0))
    cidx = w.coords_of_blocks(sorted(coupled_blocks))
    if cidx.size:
        Acl = (A + D @ C)[np.ix_(cidx, cidx)]
        Kc = K[:, cidx]
        V = _invariant_in_kernel_eig(Acl, Kc / cnorm, tol)
        if V.shape[1]:
            coupled_part = np.zeros((w.n, V.shape[1]))
            coupled_part[cidx, :] = V
            parts.append(coupled_part)

    Z = np.hstack(parts) if parts else np.zeros((w.n, 0))
    S = StructuredSubspace.from_dense(w, Z)

    # modes beyond the window
    sel = dict(S.selections)
    verified = True
    for fam in w.families:
        if not w.has_tail(fam.label):
            continue
        status = _family_status(sys, H, fam.label, n_trunc) if H.shape[0] else "ZERO"
        feeds_ok = True
        for j in active:
            if sys.output_tail_status(j, fam.label, n_trunc) != "ZERO":
                dj = D[:, j]
                Q = S.dense_basis()
                if np.linalg.norm(dj - Q @ (Q.T @ dj)) > 1e-8 * max(1.0, np.linalg.norm(dj)):
                    feeds_ok = False
        beyond = IndexSet.ge(fam.n_in_window(n_trunc) + 1)
        if status == "ZERO" and feeds_ok:
            sel[fam.label] = sel.get(fam.label, IndexSet.empty()).union(beyond)
        elif status == "UNKNOWN" and feeds_ok:
            hits = [k for k in S.selections.get(fam.label, IndexSet.empty()).upto(fam.n_in_window(n_trunc))]
            if hits:
                verified = False
                notes.append(f"{fam.label}: modes {_short(hits)} are unobservable inside the window; "
                             f"modes beyond k={fam.n_in_window(n_trunc)} are undecided (excluded)")
            else:
                notes.append(f"{fam.label}: modes beyond the window excluded; every window mode is observable")
    out = StructuredSubspace(w, sel, S.basis, verified, tuple(notes))
    return _Invariant(out, cidx, coupled_part)


def _clusters(ev: np.ndarray, rtol: float) -> list[list[int]]:
    order = np.lexsort((ev.imag, ev.real))
    out: list[list[int]] = []
    for i in order:
        for c in out:
            ref = ev[c[0]]
            if abs(ev[i] - ref) <= rtol * max(1.0, abs(ref)):
                c.append(int(i))
                break
        else:
            out.append([int(i)])
    return out


def _invariant_in_kernel_eig(M: np.ndarray, K: np.ndarray, tol=DEFAULT_TOL) -> np.ndarray:
    """Largest M-invariant subspace in ker K, as a sum over eigenvalue clusters of M.

    Simple eigenvalues are tested on their (real) eigenvectors; clustered ones
    through an ordered Schur basis of the cluster and a small kernel iteration.
    """
    m = M.shape[0]
    if K.shape[0] == 0 or np.max(np.abs(K), initial=0.0) <= tol.ip:
        return np.eye(m)
    ev, V = eig(M)
    cl = _clusters(ev, 1e-7)
    parts, done = [], set()
    for c in cl:
        lam = ev[c[0]]
        if c[0] in done:
            continue
        conj = []
        if abs(lam.imag) > 1e-12 * max(1.0, abs(lam)):
            conj = next((d for d in cl if d is not c and d[0] not in done
                         and abs(ev[d[0]] - np.conj(lam)) <= 1e-7 * max(1.0, abs(lam))), [])
        done.update(c)
        done.update(conj)
        if lam.imag < 0 and conj:
            lam = np.conj(lam)
        if len(c) == 1:
            v = V[:, c[0]]
            U = orth(np.column_stack([v.real, v.imag]) if conj else v.real[:, None], 1e-12)[0]
            if np.max(np.abs(K @ U)) <= tol.ip * 10:
                parts.append(U)
            continue
        sel = lambda x, lam=lam: abs(x - lam) <= 1e-7 * max(1.0, abs(lam)) or \
            abs(x - np.conj(lam)) <= 1e-7 * max(1.0, abs(lam))
        T, Z, sdim = schur(M, output="real", sort=lambda re, im: sel(complex(re, im)))
        U = Z[:, :sdim]
        Tc = U.T @ M @ U
        Y = largest_invariant_in(Tc, null(K @ U, tol.rank, scale=1.0), max(float(np.linalg.norm(M, 2)), 1.0))
        if Y.shape[1]:
            parts.append(U @ Y)
    return orth(np.hstack(parts), 1e-12, scale=1.0)[0] if parts else np.zeros((m, 0))


def _short(ks: Sequence[int]) -> str:
    ks = list(ks)
    return str(ks) if len(ks) <= 8 else f"[{ks[0]}, {ks[1]}, {ks[2]}, ..., {ks[-1]}] ({len(ks)} modes)"


def _dense_C(sys: RieszSpectralSystem, w: Window) -> np.ndarray:
    return np.vstack([w.coords(c) for c in sys.C]) if sys.q else np.zeros((0, w.n))


# ---------------------------------------------------------------------------
# unobservable subspaces


def unobservable_subspace(sys: RieszSpectralSystem, n_trunc: int = 200, rows: Sequence[int] | None = None,
                          strict: bool = False, tol=DEFAULT_TOL) -> StructuredSubspace:
    """Largest A-invariant subspace in ker C: a sum of sub-eigenspaces."""
    rows = list(range(sys.q)) if rows is None else list(rows)
    H = np.eye(sys.q)[rows] if rows else np.zeros((0, sys.q))
    N = _largest_invariant_in_kernel(sys, n_trunc, H, None, tol).subspace
    if strict and not N.tail_verified:
        raise RSFDIError("UNVERIFIED_TAIL", "; ".join(N.notes))
    return N


@dataclass
class StackingResult:
    subspace: StructuredSubspace
    steps: int
    converged: bool
    agreement: float


def a_unobservable_subspace(sys: RieszSpectralSystem, n_max: int = 80, n_trunc: int = 200,
                            rows: Sequence[int] | None = None, tol=DEFAULT_TOL,
                            check_agreement: bool = True) -> StackingResult:
    """Intersection of ker(C A^n), n <= n_max, by block Arnoldi on the scaled adjoint."""
    if n_max < 1:
        raise RSFDIError("INVALID", "n_max must be >= 1")
    w = sys.window(n_trunc)
    rows = list(range(sys.q)) if rows is None else list(rows)
    C = _dense_C(sys, w)[rows]
    ev = np.linalg.eigvals(w.A) if w.n <= 400 else w.eigenvalues
    shift = 0.5 * (ev.real.max() + ev.real.min())
    rad = max(float(np.max(np.abs(ev - shift))), 1.0)
    At = (w.A - shift * np.eye(w.n)).T / rad
    K, _ = orth(C.T, tol.rank)
    blk = K
    steps, converged = 0, K.shape[1] == 0
    while not converged and steps < n_max:
        steps += 1
        Y = At @ blk
        for _ in range(2):
            Y = Y - K @ (K.T @ Y)
        new, _ = orth(Y, tol.rank, scale=1.0)
        if new.shape[1] == 0:
            converged = True
            break
        K = np.hstack([K, new])
        blk = new
    if not converged:
        raise RSFDIError("NO_CONVERGENCE", f"observability constraints still growing after {n_max} powers",
                         steps=steps, rank=K.shape[1])
    S = StructuredSubspace.from_dense(w, complement(K))
    agreement = 0.0
    if check_agreement:
        N = unobservable_subspace(sys, n_trunc, rows, tol=tol)
        agreement = projector_distance(N.dense_basis(), S.dense_basis())
        if agreement <= 1e-6:
            sel = dict(S.selections)
            for lab, b in N.beyond().items():
                sel[lab] = sel.get(lab, IndexSet.empty()).union(b)
            S = StructuredSubspace(w, sel, S.basis, N.tail_verified, N.notes).canonical()
    return StackingResult(S, steps, converged, agreement)


# ---------------------------------------------------------------------------
# conditioned invariants


@dataclass
class ConditionedInvariant:
    W_star: StructuredSubspace
    W_phi: StructuredSubspace
    W_f: StructuredSubspace
    W_ell: StructuredSubspace
    Z_star: np.ndarray
    L_N: np.ndarray
    iterations: int
    bound: int
    log: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"W_star": self.W_star.to_json(), "W_phi": self.W_phi.to_json(), "W_f": self.W_f.to_json(),
                "W_ell": self.W_ell.to_json(), "iterations": self.iterations, "iteration_bound": self.bound,
                "dims": self.log}


def _generators(sys: RieszSpectralSystem, L) -> list[SpectralVector]:
    if isinstance(L, SpectralVector):
        return [L]
    return list(L)


def eigen_part(sys: RieszSpectralSystem, W: StructuredSubspace, A: np.ndarray | None = None,
               tol=DEFAULT_TOL) -> StructuredSubspace:
    """Largest sum of sub-eigenspaces of A inside W."""
    w = W.window
    A = w.A if A is None else A
    B = W.basis
    parts = []
    anorm = max(float(np.abs(w.eigenvalues).max(initial=0.0)) + 1.0, 1.0)
    if B.shape[1]:
        sel = set(W.selected_blocks())
        for g in w.eigen_groups(tol.eig):
            g = [b for b in g if b not in sel]
            idx = w.coords_of_blocks(g)
            if not idx.size or np.max(np.abs(B[idx, :])) <= 1e-14:
                continue
            V = dense_intersect(B, _unit_cols(w.n, idx))
            if V.shape[1] == 0:
                continue
            Vi = largest_invariant_in(A[np.ix_(idx, idx)], V[idx, :], anorm)
            if Vi.shape[1]:
                Z = np.zeros((w.n, Vi.shape[1]))
                Z[idx, :] = Vi
                parts.append(Z)
    Z = np.hstack(parts) if parts else np.zeros((w.n, 0))
    return StructuredSubspace(w, W.selections, orth(Z)[0] if Z.shape[1] else None,
                              W.tail_verified).canonical()


def compute_W_ell(sys: RieszSpectralSystem, L_N, n_trunc: int = 200) -> StructuredSubspace:
    """Smallest A-invariant subspace containing L_N (support scan plus block Krylov closure)."""
    w = sys.window(n_trunc)
    tails: list = []
    if isinstance(L_N, np.ndarray):
        M = L_N
    else:
        vs = _generators(sys, L_N)
        M = np.column_stack([w.coords(v) for v in vs]) if vs else np.zeros((w.n, 0))
        tails = [t for v in vs for t in v.tails if any(c != 0 for c in t.c)]
    Z = krylov_closure(w.A, M) if M.shape[1] else np.zeros((w.n, 0))
    sel = {}
    for t in tails:
        fam = sys.family(t.family)
        sel[t.family] = sel.get(t.family, IndexSet.empty()).union(
            IndexSet.ge(max(t.k0, fam.n_in_window(n_trunc) + 1)))
    return StructuredSubspace.from_dense(w, Z, sel)


def min_conditioned_invariant(sys: RieszSpectralSystem, L, n_trunc: int = 200,
                              N: StructuredSubspace | None = None, tol=DEFAULT_TOL) -> ConditionedInvariant:
    """Smallest T-conditioned invariant subspace containing span(L)."""
    w = sys.window(n_trunc)
    gens = _generators(sys, L)
    for g in gens:
        for fam_label, _ in g.entries:
            sys.family(fam_label)
    A = w.A
    C = _dense_C(sys, w)
    m = len(gens)
    G = np.column_stack([w.coords(g) for g in gens]) if m else np.zeros((w.n, 0))
    N = unobservable_subspace(sys, n_trunc, tol=tol) if N is None else N
    QN = N.dense_basis()

    # tail groups shared by generators: a combination keeps a tail unless its coefficients cancel
    groups: dict = {}
    for i, g in enumerate(gens):
        for t in g.tails:
            groups.setdefault((t.family, t.p, t.k0), []).append((i, np.asarray(t.c)))

    def tail_rows(keep_family) -> np.ndarray:
        rows = []
        for (fam, _, _), items in groups.items():
            if keep_family(fam):
                continue
            d = max(c.size for _, c in items)
            T = np.zeros((d, m))
            for i, c in items:
                T[: c.size, i] += c
            rows.append(T)
        return np.vstack(rows) if rows else np.zeros((0, m))

    # L_N = L cap N_A in generator coordinates
    nbeyond = N.beyond()
    def in_N_tail(fam: str) -> bool:
        beyond = IndexSet.ge(sys.family(fam).n_in_window(n_trunc) + 1)
        return beyond.issubset(N.selections.get(fam, IndexSet.empty()))

    Gs = np.linalg.norm(G, axis=0) if m else np.zeros(0)
    Gs[Gs == 0] = 1.0
    if m:
        R = G - QN @ (QN.T @ G)
        alpha_N = null(np.vstack([R / Gs, tail_rows(in_N_tail)]), tol.rank, scale=1.0)
    else:
        alpha_N = np.zeros((0, 0))
    gscale = float(np.max(np.linalg.norm(G, axis=0), initial=0.0))
    L_N = orth(G @ alpha_N, tol.rank, scale=gscale)[0] if alpha_N.size else np.zeros((w.n, 0))
    if L_N.shape[1]:
        lN_vecs = []
        for a in alpha_N.T:
            v = SpectralVector()
            for i, ai in enumerate(a):
                if abs(ai) > 1e-14:
                    v = v + gens[i].scaled(float(ai))
            lN_vecs.append(v)
        W_ell = compute_W_ell(sys, lN_vecs, n_trunc)
        W_ell = StructuredSubspace.from_dense(w, krylov_closure(A, L_N), W_ell.beyond())
    else:
        W_ell = StructuredSubspace.zero(w)

    # domain check on L cap ker C outside N: tails there are never in dom A^infinity
    if m and groups:
        CG = np.array([[inner_product(c, g, sys) for g in gens] for c in sys.C]) if sys.q else np.zeros((0, m))
        scale = max(1.0, float(np.max(np.abs(CG), initial=0.0)))
        Ka = null(CG / scale, tol.rank, scale=1.0) if sys.q else np.eye(m)
        if Ka.shape[1]:
            if alpha_N.size:
                Ka = Ka - alpha_N @ (np.linalg.pinv(alpha_N) @ Ka)
                Ka = orth(Ka, tol.rank, scale=1.0)[0]
            Tall = tail_rows(lambda fam: False)
            if Ka.shape[1] and Tall.shape[0] and np.max(np.abs(Tall @ Ka)) > 1e-9:
                raise RSFDIError("DOMAIN_VIOLATION",
                                 "L cap ker C contains a vector with an infinite c/k^p tail, "
                                 "which is not in the domain of every power of A")

    L_full = orth(G, tol.rank, scale=gscale)[0] if m and gscale > 0 else np.zeros((w.n, 0))
    L_perp = orth(L_full - L_N @ (L_N.T @ L_full), tol.rank, scale=1.0)[0] if L_N.shape[1] else L_full
    ker = kernel_of_output(sys, None, n_trunc)
    bound = max(1, L_full.shape[1] * (sys.q + 1))
    Z = L_perp
    log = [int(Z.shape[1])]
    it = 0
    while True:
        it += 1
        ZK = ker.intersect_dense(Z) if sys.q else Z
        Zn = dense_sum(L_perp, A @ ZK) if ZK.shape[1] else L_perp
        log.append(int(Zn.shape[1]))
        if Zn.shape[1] == Z.shape[1] and projector_distance(Zn, Z) <= tol.stationary * 10 + 1e-9:
            Z = Zn
            break
        Z = Zn
        if it > bound + 1:
            raise RSFDIError("NO_CONVERGENCE", f"Z iteration exceeded its bound {bound}", log=log)
    W = subspace_sum(W_ell, StructuredSubspace.from_dense(w, Z))
    W_phi = eigen_part(sys, W, A, tol)
    W_f = orth_complement_within(W_phi, W)
    return ConditionedInvariant(W, W_phi, W_f, W_ell, Z, L_N, it - 1 if it > 1 else it, bound, log)


# ---------------------------------------------------------------------------
# friends


@dataclass
class FriendOperator:
    D: np.ndarray                 # window whitened, n x q
    window: Window
    invariance_residual: float
    phi_residual: float
    befriends: str = ""

    def columns(self) -> list[SpectralVector]:
        return [self.window.vector(self.D[:, j], tol=0.0) for j in range(self.D.shape[1])]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.D)

    @property
    def certified(self) -> bool:
        return self.invariance_residual <= 1e-8 and self.phi_residual <= 1e-9

    def to_json(self) -> dict:
        cols = []
        for j in range(self.D.shape[1]):
            v = self.window.vector(self.D[:, j], tol=1e-15)
            cols.append([[f, k, c.tolist()] for (f, k), c in sorted(v.entries.items())])
        return {"columns": cols, "invariance_residual": self.invariance_residual,
                "phi_residual": self.phi_residual, "zero": self.is_zero, "befriends": self.befriends}


def _tail_output_dirs(sys: RieszSpectralSystem, S: StructuredSubspace) -> np.ndarray:
    """Output directions reached by modes of S beyond the window."""
    cols = []
    for lab in S.beyond():
        for j in range(sys.q):
            if sys.output_tail_status(j, lab, S.window.n_trunc) != "ZERO":
                e = np.zeros(sys.q)
                e[j] = 1.0
                cols.append(e)
    return np.column_stack(cols) if cols else np.zeros((sys.q, 0))


def friend_certificates(sys: RieszSpectralSystem, D: np.ndarray, W: StructuredSubspace,
                        W_phi: StructuredSubspace) -> tuple[float, float]:
    w = W.window
    A, C = w.A, _dense_C(sys, w)
    Q = W.dense_basis()
    inv = 0.0
    if Q.shape[1]:
        Y = (A + D @ C) @ Q
        R = Y - Q @ (Q.T @ Y)
        inv = float(np.max(np.linalg.norm(R, axis=0) / (1.0 + np.linalg.norm(A @ Q, axis=0))))
    Qp = W_phi.dense_basis()
    phi = float(np.max(np.linalg.norm(D @ (C @ Qp), axis=0))) if Qp.shape[1] and D.size else 0.0
    return inv, phi


def friend_operator(sys: RieszSpectralSystem, W_star: StructuredSubspace, W_phi: StructuredSubspace,
                    W_f: StructuredSubspace, tol=DEFAULT_TOL) -> FriendOperator:
    """Least-norm D with (A+DC)W* in W* and DC W_phi = 0."""
    w = W_star.window
    A, C = w.A, _dense_C(sys, w)
    q = sys.q
    D = np.zeros((w.n, q))
    Wt = W_f.dense_basis()
    if Wt.shape[1] and q:
        CWphi = np.hstack([C @ W_phi.dense_basis(), _tail_output_dirs(sys, W_phi)])
        cn = max(float(np.linalg.norm(C, 2)), 1.0)
        Hf = _rowspace_complement(orth(CWphi, tol.rank, scale=cn)[0] if CWphi.shape[1] else np.zeros((q, 0)), q)
        if Hf.shape[0]:
            Q = W_star.dense_basis()
            target = A @ Wt
            target = target - Q @ (Q.T @ target)
            M = Hf @ C @ Wt
            Mp = np.linalg.pinv(M, rcond=tol.rank)
            Dp = -target @ Mp
            resid = Dp @ M + target
            scale = max(1.0, float(np.max(np.linalg.norm(A @ Wt, axis=0))))
            if np.max(np.abs(resid)) > 1e-8 * scale:
                raise RSFDIError("SINGULAR_CW", "C restricted to the transversal part of W_f is not injective "
                                 "modulo W_phi; the conditioned invariant decomposition is inconsistent",
                                 residual=float(np.max(np.abs(resid))))
            D = Dp @ Hf
    D[np.abs(D) < 1e-15 * max(1.0, np.max(np.abs(D), initial=0.0))] = 0.0
    inv, phi = friend_certificates(sys, D, W_star, W_phi)
    return FriendOperator(D, w, inv, phi, W_star.describe())


# ---------------------------------------------------------------------------
# unobservability subspaces


@dataclass
class UnobservabilityResult:
    S_star: StructuredSubspace
    D: FriendOperator
    H: np.ndarray
    W_star: StructuredSubspace
    W_phi: StructuredSubspace
    W_f: StructuredSubspace
    N: StructuredSubspace
    W_phi_f: StructuredSubspace
    conditioned: ConditionedInvariant
    zero_friend_admissible: bool
    notes: tuple = ()

    @property
    def tail_verified(self) -> bool:
        return self.S_star.tail_verified

    def to_json(self) -> dict:
        return {"S_star": self.S_star.to_json(), "H": self.H.tolist(), "D": self.D.to_json(),
                "W_star": self.W_star.to_json(), "W_phi": self.W_phi.to_json(), "W_f": self.W_f.to_json(),
                "W_phi_f": self.W_phi_f.to_json(), "N": self.N.to_json(),
                "conditioned_iterations": self.conditioned.iterations,
                "zero_friend_admissible": self.zero_friend_admissible, "notes": list(self.notes)}


def mixing_matrix(sys: RieszSpectralSystem, W_star: StructuredSubspace, tol=DEFAULT_TOL) -> np.ndarray:
    """Orthonormal rows with ker(HC) = W* + ker C."""
    w = W_star.window
    C = _dense_C(sys, w)
    CW = np.hstack([C @ W_star.dense_basis(), _tail_output_dirs(sys, W_star)])
    cn = max(float(np.linalg.norm(C, 2)) if C.size else 0.0, 1.0)
    QCW = orth(CW, tol.rank, scale=cn)[0] if CW.shape[1] else np.zeros((sys.q, 0))
    return _rowspace_complement(QCW, sys.q)


def min_unobservability_subspace(sys: RieszSpectralSystem, L, n_trunc: int = 200, strict: bool = False,
                                 tol=DEFAULT_TOL) -> UnobservabilityResult:
    """Smallest unobservability subspace containing span(L), with its friend D and mixing H."""
    w = sys.window(n_trunc)
    N = unobservable_subspace(sys, n_trunc, tol=tol)
    cond = min_conditioned_invariant(sys, L, n_trunc, N, tol)
    fr = friend_operator(sys, cond.W_star, cond.W_phi, cond.W_f, tol)
    H = mixing_matrix(sys, cond.W_star, tol)
    inv = _largest_invariant_in_kernel(sys, n_trunc, H, fr.D, tol)
    S = inv.subspace
    notes = list(S.notes)
    if not contains(S, cond.W_star, 1e-7):
        notes.append("S* does not contain W* to tolerance")
    C = _dense_C(sys, w)
    Q = S.dense_basis()
    AQ = w.A @ Q
    a_inv = float(np.linalg.norm(AQ - Q @ (Q.T @ AQ))) <= 1e-8 * max(1.0, float(np.linalg.norm(AQ)))
    zero_ok = a_inv and (H.shape[0] == 0 or float(np.max(np.abs(H @ C @ Q), initial=0.0)) <= 1e-8)
    if zero_ok and not fr.is_zero:
        notes.append("D = 0 is also admissible for S*: S* is A-invariant and lies in ker HC")
    Wpf = StructuredSubspace.from_dense(w, inv.coupled_part) if inv.coupled_part.shape[1] else StructuredSubspace.zero(w)
    if strict and not S.tail_verified:
        raise RSFDIError("UNVERIFIED_TAIL", "; ".join(S.notes))
    return UnobservabilityResult(S, fr, H, cond.W_star, cond.W_phi, cond.W_f, N, Wpf, cond, zero_ok, tuple(notes))


# ---------------------------------------------------------------------------
# verdicts


@dataclass
class Verdict:
    ok: bool
    reasons: list
    W_phi: StructuredSubspace | None = None
    W_f: StructuredSubspace | None = None
    residual: float = 0.0
    friend: FriendOperator | None = None

    def to_json(self) -> dict:
        return {"ok": self.ok, "reasons": self.reasons, "residual": self.residual,
                "W_phi": None if self.W_phi is None else self.W_phi.describe(),
                "W_f_dim": None if self.W_f is None else int(self.W_f.basis.shape[1])}


def _conditioned_residual(A: np.ndarray, C: np.ndarray, Q: np.ndarray) -> float:
    """max distance of A(W cap ker C) from W, relative."""
    if Q.shape[1] == 0:
        return 0.0
    K = null(C @ Q, scale=max(float(np.linalg.norm(C, 2)), 1e-300)) if C.shape[0] else np.eye(Q.shape[1])
    if K.shape[1] == 0:
        return 0.0
    X = Q @ K
    Y = A @ X
    R = Y - Q @ (Q.T @ Y)
    return float(np.max(np.linalg.norm(R, axis=0) / (1.0 + np.linalg.norm(Y, axis=0))))


def is_T_conditioned_invariant(sys: RieszSpectralSystem, W: StructuredSubspace, tol=DEFAULT_TOL,
                               A: np.ndarray | None = None, C: np.ndarray | None = None) -> Verdict:
    """Decomposition W = W_phi + W_f with finite W_f, and A(W cap ker C) in W."""
    w = W.window
    A = w.A if A is None else A
    C = _dense_C(sys, w) if C is None else C
    reasons = []
    W_phi = eigen_part(sys, W, A, tol)
    W_f = orth_complement_within(W_phi, W)
    if not W_f.is_finite:
        reasons.append("residual part is not finite dimensional")
    res = _conditioned_residual(A, C, W.dense_basis())
    if res > 1e-8:
        reasons.append(f"A(W cap ker C) leaves W (residual {res:.2e})")
    for lab in W.beyond():
        if any(sys.output_tail_status(j, lab, w.n_trunc) == "UNKNOWN" for j in range(C.shape[0])) \
                and C.shape[0] == sys.q:
            reasons.append(f"{lab}: kernel membership beyond the window is undecided")
    return Verdict(not reasons, reasons, W_phi, W_f, res)


def is_controlled_invariant_dual(sys: RieszSpectralSystem, V: StructuredSubspace, tol=DEFAULT_TOL) -> Verdict:
    """V is T-controlled invariant iff V^perp is conditioned invariant for (B^T, A^T)."""
    w = V.window
    Vp = orth_complement_within(V)
    B = np.column_stack([w.coords(b) for b in sys.B]) if sys.B else np.zeros((w.n, 0))
    res = _conditioned_residual(w.A.T, B.T, Vp.dense_basis())
    reasons = [] if res <= 1e-8 else [f"A^T(V^perp cap ker B^T) leaves V^perp (residual {res:.2e})"]
    return Verdict(not reasons, reasons, None, Vp, res)


@dataclass
class SolvabilityReport:
    fault: int
    intersection_dim: int
    ok: bool
    result: UnobservabilityResult

    @property
    def verdict(self) -> str:
        return "NECESSARY_OK" if self.ok else "NECESSARY_FAIL"

    def to_json(self) -> dict:
        return {"fault": self.fault + 1, "intersection_dim": self.intersection_dim, "verdict": self.verdict}


def check_fdi_necessary(sys: RieszSpectralSystem, i: int, n_trunc: int = 200,
                        result: UnobservabilityResult | None = None, tol=DEFAULT_TOL) -> SolvabilityReport:
    """S_i* (built from the other faults) must meet span(L_i) only in 0."""
    if not 0 <= i < sys.p:
        raise RSFDIError("INVALID", f"fault index {i + 1} out of range")
    others = [sys.faults[j] for j in range(sys.p) if j != i]
    U = min_unobservability_subspace(sys, others, n_trunc, tol=tol) if result is None else result
    Li = sys.faults[i]
    inside = U.S_star.contains_vector(Li, 1e-8)
    dim = 1 if inside and not Li.is_zero() else 0
    return SolvabilityReport(i, dim, dim == 0, U)
