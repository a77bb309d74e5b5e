"""Detection filters on the quotient X/S*.

The filter is

    w' = F w + G u - E y,      r = H y - M w,

with F = A_p + D_o M, G = P B and E = P D + D_o H.  Writing e = P x - w gives
e' = F e + P L_i f_i and r = M e, so r is blind to every fault whose signature
lies in S* and the filter is stable exactly when F is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import schur, solve_continuous_lyapunov
from scipy.signal import place_poles

from .config import DEFAULT_TOL, AnalysisConfig
from .errors import RSFDIError
from .geometric_invariants import UnobservabilityResult, check_fdi_necessary, min_unobservability_subspace
from .spectral_core import RieszSpectralSystem
from .subspace_algebra import IndexSet, QuotientMap, quotient_map

STRATEGIES = ("CASE1", "CASE2", "LYAPUNOV")


@dataclass(frozen=True)
class QuotientTail:
    """Modes of one family beyond the window that survive in the quotient."""

    family: str
    indices: IndexSet
    sup_re: float | None  # by rule inspection, None when undecidable

    def to_json(self) -> dict:
        return {"family": self.family, "indices": self.indices.to_json(), "sup_re": self.sup_re}


@dataclass(frozen=True)
class QuotientSystem:
    P: QuotientMap
    A_p: np.ndarray
    M: np.ndarray
    tails: tuple = ()
    fit_residual: float = 0.0

    def __iter__(self):
        return iter((self.P, self.A_p, self.M))

    @property
    def dim(self) -> int:
        return self.P.dim

    @property
    def is_finite(self) -> bool:
        return not self.tails

    def tail_sup_re(self) -> float:
        """Largest real part over the quotient tail (-inf without a tail)."""
        vals = [t.sup_re for t in self.tails]
        if any(v is None for v in vals):
            return math.inf
        return max(vals, default=-math.inf)

    def eigenvalues(self) -> np.ndarray:
        """Spectrum of the window block, sorted by decreasing real part."""
        ev = np.linalg.eigvals(self.A_p) if self.A_p.size else np.zeros(0, complex)
        return ev[np.lexsort((ev.imag, -ev.real))]

    def labelled_eigenvalues(self) -> list:
        """(family, k, eigenvalue) for quotient coordinates that are whole untouched blocks."""
        out = []
        for j, lab in enumerate(self.P.coordinate_labels()):
            if lab is not None:
                fam, k = lab
                out.append((fam, k, self.P.window.families[[f.label for f in self.P.window.families].index(fam)].eigenvalue(k)))
        return out


@dataclass(frozen=True)
class StabilityCertificate:
    kind: str                       # EIGENVALUE_MARGIN or LYAPUNOV
    margin: float
    lyapunov_block: np.ndarray | None = None
    lyapunov_residual: float | None = None
    tail_bound: float | None = None  # sup of -1/(2 Re lambda_k) over the tail
    notes: tuple = ()

    def to_json(self) -> dict:
        d = {"kind": self.kind, "margin": self.margin, "lyapunov_residual": self.lyapunov_residual,
             "tail_bound": self.tail_bound, "notes": list(self.notes)}
        if self.lyapunov_block is not None:
            d["lyapunov_min_eig"] = float(np.linalg.eigvalsh(self.lyapunov_block).min())
        return d


@dataclass(frozen=True)
class DetectionFilter:
    """Immutable residual generator for fault ``index``."""

    index: int
    quotient: QuotientSystem
    D_o: np.ndarray
    F: np.ndarray
    G: np.ndarray
    E: np.ndarray
    H: np.ndarray
    D: np.ndarray
    certificate: StabilityCertificate
    strategy: str = "CASE1"
    notes: tuple = field(default=())

    @property
    def P(self) -> QuotientMap:
        return self.quotient.P

    @property
    def M(self) -> np.ndarray:
        return self.quotient.M

    @property
    def A_p(self) -> np.ndarray:
        return self.quotient.A_p

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def margin(self) -> float:
        return self.certificate.margin

    def to_json(self) -> dict:
        w = self.P.window
        return {
            "index": self.index,
            "strategy": self.strategy,
            "n_trunc": w.n_trunc,
            "dim": self.dim,
            "families": [f.to_json() for f in w.families],
            "quotient_labels": [list(l) if l else None for l in self.P.coordinate_labels()],
            "P": self.P.P.tolist(),
            "A_p": self.A_p.tolist(),
            "M": self.M.tolist(),
            "D_o": self.D_o.tolist(),
            "F": self.F.tolist(),
            "G": self.G.tolist(),
            "E": self.E.tolist(),
            "H": self.H.tolist(),
            "tails": [t.to_json() for t in self.quotient.tails],
            "certificate": self.certificate.to_json(),
            "notes": list(self.notes),
        }


def _dense(sys: RieszSpectralSystem, w):
    C = np.vstack([w.coords(c) for c in sys.C]) if sys.q else np.zeros((0, w.n))
    B = np.column_stack([w.coords(b) for b in sys.B]) if sys.m else np.zeros((w.n, 0))
    L = np.column_stack([w.coords(l) for l in sys.faults]) if sys.p else np.zeros((w.n, 0))
    return B, C, L


def quotient_system(sys: RieszSpectralSystem, U: UnobservabilityResult, tol=DEFAULT_TOL) -> QuotientSystem:
    """Compress A + DC onto X/S* and solve M P = H C."""
    S = U.S_star
    w = S.window
    Q = quotient_map(sys, S)
    _, C, _ = _dense(sys, w)
    Acl = w.A + U.D.D @ C
    R = Q.R
    A_p = R.T @ Acl @ R
    HC = U.H @ C
    # ker P = S*, so M = HC R solves M P = HC exactly when S* lies in ker HC
    M = HC @ R
    ref = max(1.0, float(np.linalg.norm(C, 2)) if C.size else 0.0)
    resid = float(np.linalg.norm(M @ R.T - HC)) / ref if HC.size else 0.0
    if resid > 1e-10:
        raise RSFDIError("INCONSISTENT_H", "M P = H C has no solution: S* is not inside ker HC", residual=resid)
    tails = []
    beyond = S.beyond()
    for fam in w.families:
        if not w.has_tail(fam.label):
            continue
        n_in = fam.n_in_window(w.n_trunc)
        rest = IndexSet.ge(n_in + 1).minus(beyond.get(fam.label, IndexSet.empty()))
        if rest.is_empty:
            continue
        tails.append(QuotientTail(fam.label, rest, fam.rule.sup_re_beyond(n_in)))
    return QuotientSystem(Q, A_p, M, tuple(tails), resid)


def _obsv_rank(A: np.ndarray, M: np.ndarray) -> int:
    n = A.shape[0]
    if n == 0:
        return 0
    blocks, X = [], M
    for _ in range(n):
        blocks.append(X)
        X = X @ A
    O = np.vstack(blocks)
    if not O.size:
        return 0
    s = np.linalg.svd(O, compute_uv=False)
    ref = max(1.0, float(np.linalg.norm(A, 2))) ** (n - 1) * max(1.0, float(np.linalg.norm(M, 2)))
    return int(np.sum(s > 1e-9 * ref))


def _reflect(ev: np.ndarray, margin: float) -> np.ndarray:
    """Mirror eigenvalues with Re > -1.5 margin across Re = -margin."""
    return np.array([z if z.real <= -1.5 * margin else complex(min(-2 * margin - z.real, -1.5 * margin), z.imag)
                     for z in ev])


def _split_repeats(tgt: np.ndarray, rank: int) -> np.ndarray:
    """Shift targets repeated more often than the output rank allows."""
    tgt = np.array(tgt, dtype=complex)
    seen: dict = {}
    for j, z in enumerate(tgt):
        key = (round(z.real, 9), round(z.imag, 9))
        c = seen.get(key, 0)
        seen[key] = c + 1
        step = c // max(rank, 1)
        if step:
            tgt[j] = complex(z.real - 0.05 * step * max(1.0, abs(z)), z.imag)
    return tgt


def _place(A: np.ndarray, M: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gain K with eig(A + K M) = targets."""
    try:
        res = place_poles(A.T, M.T, targets, method="YT" if M.shape[0] > 1 else "KNV0")
    except ValueError as exc:
        raise RSFDIError("SYNTHESIS", f"pole placement failed: {exc}", targets=targets.tolist()) from exc
    return -res.gain_matrix.T


def _tail_bound(Q: QuotientSystem, strict_margin: float | None) -> tuple[float, float | None]:
    sup = Q.tail_sup_re()
    if strict_margin is not None and sup > -strict_margin:
        raise RSFDIError("NO_MARGIN", "quotient tail eigenvalues do not satisfy Re <= -margin beyond the window",
                         sup_re=sup, margin=strict_margin)
    bound = None if sup == -math.inf else (math.inf if sup >= 0 else 1.0 / (2.0 * -sup))
    return sup, bound


def observer_gain(Q: QuotientSystem, strategy: str = "CASE1", margin_req: float = 0.05,
                  targets=None, D_o: np.ndarray | None = None) -> tuple[np.ndarray, StabilityCertificate]:
    """Observer gain D_o for the quotient pair (M, A_p) and its stability certificate."""
    if strategy not in STRATEGIES:
        raise RSFDIError("INVALID", f"unknown strategy {strategy!r}")
    A, M = Q.A_p, Q.M
    n, qh = A.shape[0], M.shape[0]

    if strategy == "LYAPUNOV":
        Do = np.zeros((n, qh)) if D_o is None else np.asarray(D_o, dtype=float).reshape(n, qh)
        sup, bound = _tail_bound(Q, None)
        if sup >= 0:
            raise RSFDIError("NO_MARGIN", "quotient tail is not exponentially stable", sup_re=sup)
        return Do, lyapunov_certificate(A + Do @ M, sup, bound)

    sup, bound = _tail_bound(Q, margin_req)
    if strategy == "CASE2" and not Q.is_finite:
        raise RSFDIError("INVALID", "CASE2 needs a finite-dimensional quotient")

    Do = np.zeros((n, qh))
    notes = []
    if n:
        if strategy == "CASE2":
            Z = np.eye(n)
            s = n
            T = A
        else:
            T, Z, s = schur(A, output="real", sort=lambda re, im: re >= -margin_req)
        if s:
            A1, M1 = T[:s, :s], M @ Z[:, :s]
            if qh == 0 or _obsv_rank(A1, M1) < s:
                if strategy == "CASE2":
                    # detectability suffices: retry on the slow part only
                    return observer_gain(Q, "CASE1", margin_req, targets)
                raise RSFDIError("UNOBSERVABLE_UNSTABLE_PART",
                                 "the slow part of the quotient is not observable through M", dim=s)
            ev = np.linalg.eigvals(A1)
            if targets is None:
                keep = strategy == "CASE2"
                tgt = np.array([z if keep and z.real <= -margin_req else _reflect(np.array([z]), margin_req)[0]
                                for z in ev])
                tgt = _split_repeats(tgt, int(np.linalg.matrix_rank(M1)))
            else:
                tgt = np.asarray(targets, dtype=complex)
            K = _place(A1, M1, tgt)
            Do = Z[:, :s] @ K
            notes.append(f"placed {s} slow quotient eigenvalues")
        else:
            notes.append("every quotient eigenvalue already satisfies the margin: D_o = 0")
    F = A + Do @ M
    ev = np.linalg.eigvals(F) if n else np.zeros(0)
    win = -float(np.max(ev.real)) if n else math.inf
    margin = min(win, -sup)
    if not margin > 0:
        raise RSFDIError("UNSTABLE", "closed quotient dynamics are not stable", margin=margin)
    return Do, StabilityCertificate("EIGENVALUE_MARGIN", margin, tail_bound=bound, notes=tuple(notes))


def lyapunov_certificate(F: np.ndarray, tail_sup: float = -math.inf, tail_bound: float | None = None,
                         tol: float = 1e-8) -> StabilityCertificate:
    """Solve F^T X + X F = -I on the window block and check X > 0."""
    n = F.shape[0]
    if n == 0:
        return StabilityCertificate("LYAPUNOV", -tail_sup, np.zeros((0, 0)), 0.0, tail_bound)
    X = solve_continuous_lyapunov(F.T, -np.eye(n))
    X = 0.5 * (X + X.T)
    resid = float(np.linalg.norm(F.T @ X + X @ F + np.eye(n))) / max(1.0, float(np.linalg.norm(X)))
    lmin = float(np.linalg.eigvalsh(X).min())
    if not np.all(np.isfinite(X)) or resid > tol or lmin <= 0:
        raise RSFDIError("UNSTABLE", "no positive definite Lyapunov solution", residual=resid, min_eig=lmin)
    # X > 0 with F^T X + X F = -I gives decay rate 1 / (2 lambda_max(X))
    rate = 1.0 / (2.0 * float(np.linalg.eigvalsh(X).max()))
    margin = min(rate, -tail_sup)
    return StabilityCertificate("LYAPUNOV", margin, X, resid, tail_bound)


def build_detection_filter(sys: RieszSpectralSystem, U: UnobservabilityResult, index: int,
                           D_o: np.ndarray | None = None, strategy: str = "CASE1",
                           margin_req: float = 0.05, targets=None, tol=DEFAULT_TOL) -> DetectionFilter:
    """Assemble F, G, E, M, H for fault ``index`` and check the filter invariants."""
    Q = quotient_system(sys, U, tol)
    if D_o is None or strategy == "LYAPUNOV":
        D_o, cert = observer_gain(Q, strategy, margin_req, targets, D_o)
    else:
        D_o = np.asarray(D_o, dtype=float)
        _, bound = _tail_bound(Q, None)
        cert = _margin_certificate(Q.A_p + D_o @ Q.M, Q.tail_sup_re(), bound)
    w = Q.P.window
    B, C, L = _dense(sys, w)
    P = Q.P.P
    F = Q.A_p + D_o @ Q.M
    G = P @ B
    E = P @ U.D.D + D_o @ U.H

    for j, Lj in enumerate(sys.faults):
        if j == index:
            continue
        leak = float(np.linalg.norm(P @ L[:, j]))
        if leak > tol.rank * max(1.0, float(np.linalg.norm(L[:, j]))) or not U.S_star.contains_vector(Lj, 1e-8):
            raise RSFDIError("DECOUPLING_FAIL", f"fault {j + 1} leaks into residual {index + 1}", leak=leak)
    sens = float(np.linalg.norm(P @ L[:, index]))
    if sens <= tol.rank * max(1.0, float(np.linalg.norm(L[:, index]))):
        raise RSFDIError("DECOUPLING_FAIL", f"fault {index + 1} is invisible to its own residual", gain=sens)

    notes = U.notes
    return DetectionFilter(index, Q, D_o, F, G, E, U.H, U.D.D, cert, strategy, tuple(notes))


def _margin_certificate(F: np.ndarray, tail_sup: float, bound) -> StabilityCertificate:
    ev = np.linalg.eigvals(F) if F.size else np.zeros(0)
    margin = min(-float(np.max(ev.real)) if ev.size else math.inf, -tail_sup)
    if not margin > 0:
        raise RSFDIError("UNSTABLE", "filter dynamics are not stable", margin=margin)
    return StabilityCertificate("EIGENVALUE_MARGIN", margin, tail_bound=bound)


def verify_error_dynamics(filt: DetectionFilter, sys: RieszSpectralSystem | None = None) -> StabilityCertificate:
    """Re-derive the certificate of e' = F e + P L_i f_i from the assembled filter."""
    Q = filt.quotient
    sup, bound = _tail_bound(Q, None)
    if filt.strategy == "LYAPUNOV":
        if sup >= 0:
            raise RSFDIError("UNSTABLE", "quotient tail is not stable", sup_re=sup)
        return lyapunov_certificate(filt.F, sup, bound)
    return _margin_certificate(filt.F, sup, bound)


def synthesize(sys: RieszSpectralSystem, index: int, cfg: AnalysisConfig | None = None,
               strategy: str = "CASE1", D_o=None, targets=None) -> tuple[DetectionFilter, UnobservabilityResult]:
    """Full procedure for one fault: S* of the other signatures, necessary check, filter."""
    cfg = cfg or AnalysisConfig()
    if not 0 <= index < sys.p:
        raise RSFDIError("INVALID", f"fault index {index + 1} out of range 1..{sys.p}")
    others = [l for j, l in enumerate(sys.faults) if j != index]
    U = min_unobservability_subspace(sys, others, cfg.n_trunc, tol=cfg.tol)
    if not U.tail_verified and not cfg.allow_unverified:
        raise RSFDIError("UNVERIFIED_TAIL", "S* beyond the window could not be decided", notes=U.notes)
    rep = check_fdi_necessary(sys, index, cfg.n_trunc, result=U)
    if not rep.ok:
        raise RSFDIError("DECOUPLING_FAIL", f"fault {index + 1} signature meets S*: necessary condition fails")
    filt = build_detection_filter(sys, U, index, D_o, strategy, cfg.margin_req, targets, cfg.tol)
    return filt, U
