"""Independent dense oracles and random system generators for tests."""

from __future__ import annotations

import mpmath as mp
import numpy as np
from scipy.linalg import null_space, orth

from rsfdi.spectral_core import EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector


def o_orth(M, scale=None):
    M = np.atleast_2d(M)
    if M.size == 0 or M.shape[1] == 0:
        return np.zeros((M.shape[0], 0))
    if scale is None:
        return orth(M, rcond=1e-9)
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    return u[:, : int(np.sum(s > 1e-9 * scale))]


def o_null(M, n, scale=None):
    """Null space; singular values below 1e-9 * scale count as zero."""
    M = np.atleast_2d(M)
    if M.shape[0] == 0 or not np.any(M):
        return np.eye(n)
    if scale is None:
        return null_space(M, rcond=1e-9)
    _, s, vh = np.linalg.svd(M)
    r = int(np.sum(s > 1e-9 * scale))
    return vh[r:].conj().T


def o_intersect(Q1, Q2):
    n = Q1.shape[0]
    if Q1.shape[1] == 0 or Q2.shape[1] == 0:
        return np.zeros((n, 0))
    K = o_null(np.hstack([Q1, -Q2]), Q1.shape[1] + Q2.shape[1])
    return o_orth(Q1 @ K[: Q1.shape[1]])


def o_proj(Q):
    return Q @ Q.T


def o_dist(Q1, Q2):
    return float(np.linalg.norm(o_proj(Q1) - o_proj(Q2), 2))


def conditioned_invariant(A, C, L):
    """W_0 = L, W_{k+1} = L + A (W_k cap ker C)."""
    n = A.shape[0]
    kerC = o_null(C, n)
    W = o_orth(L)
    ref = max(np.linalg.norm(A, 2), np.linalg.norm(L, 2), 1.0)
    for _ in range(n + 2):
        Wn = o_orth(np.hstack([L, A @ o_intersect(W, kerC)]), ref)
        if Wn.shape[1] == W.shape[1]:  # monotone non-decreasing: equal dimension means stationary
            return Wn
        W = Wn
    return W


def unobservability_subspace(A, C, L):
    """S_0 = X, S_{k+1} = W* + (ker C cap A^{-1} S_k)."""
    n = A.shape[0]
    W = conditioned_invariant(A, C, L)
    kerC = o_null(C, n)
    S = np.eye(n)
    for _ in range(n + 2):
        Sperp = o_null(S.T, n) if S.shape[1] < n else np.zeros((n, 0))
        pre = o_null(Sperp.T @ A, n, max(np.linalg.norm(A, 2), 1.0)) if Sperp.shape[1] else np.eye(n)
        Sn = o_orth(np.hstack([W, o_intersect(kerC, pre)]))
        if Sn.shape[1] == S.shape[1]:  # monotone non-increasing
            return Sn
        S = Sn
    return S


def unobservable(A, C):
    n = A.shape[0]
    O = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)]) if C.shape[0] else np.zeros((0, n))
    return o_null(O, n)


def random_modal_system(rng, n_max=10, q=None, p=2, with_repeats=True):
    """Modal block-diagonal system built from one-mode finite families."""
    fams = []
    n = 0
    target = int(rng.integers(3, n_max + 1))
    i = 0
    while n < target:
        kind = rng.choice(["real", "real", "complex", "jordan", "repeat"] if with_repeats else ["real", "complex"])
        lam = float(np.round(rng.uniform(-3, 1), 1))
        if kind == "complex" and n + 2 <= target:
            fams.append(ModeFamily(f"m{i}", EigenRule.poly([lam], [float(rng.uniform(0.5, 2))]), dim=2, count=1))
            n += 2
        elif kind == "jordan" and n + 2 <= target:
            fams.append(ModeFamily(f"m{i}", EigenRule.poly([lam]), jordan=((1, 2),), count=1))
            n += 2
        elif kind == "repeat" and n + 2 <= target:
            fams.append(ModeFamily(f"m{i}", EigenRule.poly([lam]), overrides=((1, 2),), count=1))
            n += 2
        else:
            fams.append(ModeFamily(f"m{i}", EigenRule.poly([lam]), count=1))
            n += 1
        i += 1
    q = int(rng.integers(1, 4)) if q is None else q

    def rvec(sparse=False):
        ent = {}
        for f in fams:
            d = f.block_dim(1)
            v = rng.standard_normal(d)
            if sparse and rng.random() < 0.5:
                v[:] = 0.0
            ent[(f.label, 1)] = v
        return SpectralVector(ent)

    C = [rvec(sparse=True) for _ in range(q)]
    L = [rvec(sparse=rng.random() < 0.5) for _ in range(p)]
    return RieszSpectralSystem(fams, B=[rvec()], C=C, faults=L)


def dense(sys):
    w = sys.window(1)
    C = np.vstack([w.coords(c) for c in sys.C])
    L = np.column_stack([w.coords(v) for v in sys.faults])
    return w.A, C, L


# Multiprecision versions of the same recursions. They referee disagreements on
# ill-conditioned instances where the double precision oracle loses digits.
_MP_DPS = 50
_MP_TOL = mp.mpf(10) ** -30


def _mp_tomp(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return mp.matrix(X.tolist()) if X.size else mp.matrix(X.shape[0], 0)


def _mp_null(X, n):
    if X.rows == 0 or X.cols == 0:
        return mp.eye(n)
    pad = X
    if X.rows < n:
        pad = mp.matrix(n, n)
        for i in range(X.rows):
            for j in range(n):
                pad[i, j] = X[i, j]
    _, S, V = mp.svd_r(pad)
    smax = max([abs(s) for s in S] + [mp.mpf(0)])
    r = sum(1 for s in S if abs(s) > _MP_TOL * max(1, smax))
    out = mp.matrix(n, n - r)
    for k in range(r, n):
        for i in range(n):
            out[i, k - r] = V[k, i]
    return out


def _mp_orth(X):
    n = X.rows
    if X.cols == 0:
        return mp.matrix(n, 0)
    perp = _mp_null(X.T, n)
    return _mp_null(perp.T, n) if perp.cols else mp.eye(n)


def _mp_hstack(*Ms):
    n = Ms[0].rows
    out = mp.matrix(n, sum(M.cols for M in Ms))
    c = 0
    for M in Ms:
        for j in range(M.cols):
            for i in range(n):
                out[i, c] = M[i, j]
            c += 1
    return out


def _mp_intersect(Q1, Q2):
    n = Q1.rows
    if Q1.cols == 0 or Q2.cols == 0:
        return mp.matrix(n, 0)
    K = _mp_null(_mp_hstack(Q1, -Q2), Q1.cols + Q2.cols)
    if K.cols == 0:
        return mp.matrix(n, 0)
    Kt = mp.matrix(Q1.cols, K.cols)
    for i in range(Q1.cols):
        for j in range(K.cols):
            Kt[i, j] = K[i, j]
    return _mp_orth(Q1 * Kt)


def _mp_ci(A, C, L):
    n = A.rows
    kerC = _mp_null(C, n)
    Lq = W = _mp_orth(L)
    for _ in range(n + 2):
        I = _mp_intersect(W, kerC)
        Wn = _mp_orth(_mp_hstack(Lq, A * I)) if I.cols else Lq
        if Wn.cols == W.cols:
            return Wn
        W = Wn
    return W


def _mp_us(A, C, L):
    n = A.rows
    W = _mp_ci(A, C, L)
    kerC = _mp_null(C, n)
    S = mp.eye(n)
    for _ in range(n + 2):
        pre = _mp_null(_mp_null(S.T, n).T * A, n) if S.cols < n else mp.eye(n)
        I = _mp_intersect(kerC, pre)
        Sn = _mp_orth(_mp_hstack(W, I)) if I.cols else W
        if Sn.cols == S.cols:
            return Sn
        S = Sn
    return S


def _mp_tonp(Q):
    return np.array(Q.tolist(), dtype=float).reshape(Q.rows, Q.cols)


def mp_conditioned_invariant(A, C, L):
    with mp.workdps(_MP_DPS):
        return _mp_tonp(_mp_ci(_mp_tomp(A), _mp_tomp(C), _mp_tomp(L)))


def mp_unobservability_subspace(A, C, L):
    with mp.workdps(_MP_DPS):
        return _mp_tonp(_mp_us(_mp_tomp(A), _mp_tomp(C), _mp_tomp(L)))


def compare_with_oracle(sys, fault=1, tol=1e-8):
    """Projector distances of library W* and S* against the oracles.

    Disagreements above tol are re-checked against the multiprecision oracle.
    Returns (d_W, d_S, refereed, cond, unobs).
    """
    from rsfdi.geometric_invariants import min_conditioned_invariant, min_unobservability_subspace
    A, C, L = dense(sys)
    Lf = L[:, fault:fault + 1]
    cond = min_conditioned_invariant(sys, [sys.faults[fault]], 1)
    U = min_unobservability_subspace(sys, [sys.faults[fault]], 1)
    dW = o_dist(cond.W_star.dense_basis(), conditioned_invariant(A, C, Lf))
    dS = o_dist(U.S_star.dense_basis(), unobservability_subspace(A, C, Lf))
    refereed = 0
    if dW > tol:
        refereed += 1
        dW = o_dist(cond.W_star.dense_basis(), mp_conditioned_invariant(A, C, Lf))
    if dS > tol:
        refereed += 1
        dS = o_dist(U.S_star.dense_basis(), mp_unobservability_subspace(A, C, Lf))
    return dW, dS, refereed, cond, U
