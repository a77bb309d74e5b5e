"""Regular Riesz-spectral systems.

The state space is spanned by mode families.  A family is a countable set of
real eigenspaces indexed by k = 1, 2, ... with a closed-form eigenvalue rule.
Vectors are stored as biorthogonal coefficients: finitely many explicit
entries plus optional tails of the form c / k**p.  Numerical work happens in a
*window* holding the first ``n_trunc`` modes of every family; coordinates in
the window are whitened by the per-mode Gram block so that the Euclidean dot
product is the Hilbert-space inner product.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import sqrtm
from scipy.special import zeta

from .config import DEFAULT_TOL, Tolerances
from .errors import RSFDIError

# ---------------------------------------------------------------------------
# eigenvalue rules


@dataclass(frozen=True)
class EigenRule:
    """Closed-form k -> lambda_k.

    ``poly``: real and imaginary parts are polynomials in k (ascending
    coefficients).  ``log``: a + b*log(k).  ``callable``: arbitrary python
    function, only checked inside the truncation window.
    """

    kind: str
    re: tuple = ()
    im: tuple = ()
    fn: Callable | None = field(default=None, compare=False)
    source: Mapping | None = field(default=None, compare=False)

    @staticmethod
    def poly(re: Sequence[float], im: Sequence[float] = ()) -> "EigenRule":
        return EigenRule("poly", tuple(float(c) for c in re), tuple(float(c) for c in im))

    @staticmethod
    def affine_ksq(a: float, b: float) -> "EigenRule":
        return EigenRule("poly", (float(a), 0.0, float(b)), (),
                         source={"kind": "affine_ksq", "a": a, "b": b})

    @staticmethod
    def log(a: float, b: float) -> "EigenRule":
        return EigenRule("log", (float(a), float(b)))

    @staticmethod
    def from_callable(fn: Callable) -> "EigenRule":
        return EigenRule("callable", fn=fn)

    def __call__(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        if self.kind == "poly":
            re = np.polynomial.polynomial.polyval(k, self.re) if self.re else np.zeros_like(k)
            im = np.polynomial.polynomial.polyval(k, self.im) if self.im else np.zeros_like(k)
            return re + 1j * im
        if self.kind == "log":
            return (self.re[0] + self.re[1] * np.log(k)) + 0j
        out = np.asarray([complex(self.fn(int(kk))) for kk in np.atleast_1d(k)])
        return out.reshape(k.shape)

    @property
    def degree(self) -> int | None:
        if self.kind != "poly":
            return None
        d = 0
        for coeffs in (self.re, self.im):
            nz = [i for i, c in enumerate(coeffs) if c != 0.0]
            if nz:
                d = max(d, nz[-1])
        return d

    def poly_coeffs(self) -> np.ndarray:
        n = max(len(self.re), len(self.im), 1)
        out = np.zeros(n, dtype=complex)
        out[: len(self.re)] += self.re
        out[: len(self.im)] += 1j * np.asarray(self.im)
        return out

    def sup_re_beyond(self, n: int) -> float | None:
        """sup Re lambda_k over k > n, by rule inspection; None when undecidable."""
        if self.kind == "log":
            return math.inf if self.re[1] > 0 else float(self.re[0] + self.re[1] * math.log(n + 1))
        if self.kind != "poly":
            return None
        re = np.trim_zeros(np.asarray(self.re, dtype=float), "b")
        if re.size <= 1:
            return float(re[0]) if re.size else 0.0
        if re[-1] > 0:
            return math.inf
        cands = [n + 1.0]
        crit = np.polynomial.polynomial.polyroots(np.polynomial.polynomial.polyder(re))
        for r in np.atleast_1d(crit):
            if abs(r.imag) < 1e-12 and r.real > n + 1:
                cands += [math.floor(r.real), math.ceil(r.real)]
        return float(max(np.polynomial.polynomial.polyval(np.asarray(cands), re)))

    def to_json(self) -> dict:
        if self.source is not None:
            return dict(self.source)
        if self.kind == "poly":
            d = {"kind": "poly", "coeffs": list(self.re)}
            if self.im:
                d["imag_coeffs"] = list(self.im)
            return d
        if self.kind == "log":
            return {"kind": "log", "a": self.re[0], "b": self.re[1]}
        raise RSFDIError("INVALID", "callable eigenvalue rules cannot be serialized")

    @staticmethod
    def from_json(d: Mapping) -> "EigenRule":
        kind = d["kind"]
        if kind == "poly":
            return EigenRule("poly", tuple(map(float, d["coeffs"])),
                             tuple(map(float, d.get("imag_coeffs", ()))))
        if kind == "affine_ksq":
            r = EigenRule.affine_ksq(d["a"], d["b"])
            if "imag" in d:
                return EigenRule("poly", r.re, (float(d["imag"]),), source=dict(d))
            return r
        if kind == "log":
            return EigenRule.log(d["a"], d["b"])
        raise RSFDIError("INVALID", f"unknown eigenvalue rule kind {kind!r}")


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class ModeFamily:
    """A countable family of real eigenspaces sharing an eigenvalue rule.

    ``dim`` is 1 for real simple modes and 2 for complex-conjugate pairs,
    stored as the rotation-scaling block [[a, b], [-b, a]].  ``overrides``
    gives (k, d) for semisimple repeated modes of real families and
    ``jordan`` gives (k, chain length).  ``gram`` is the Gram weight of each
    mode (a scalar or a dim x dim SPD block).  ``count`` makes the family
    finite.  Coefficients are taken against the biorthogonal pair (phi_k, psi_k).
    """

    label: str
    rule: EigenRule
    dim: int = 1
    overrides: tuple = ()
    jordan: tuple = ()
    gram: object = 1.0
    count: int | None = None
    gap_tail_bound: float | None = None
    coefficient_semantics: str = "biorthogonal"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise RSFDIError("INVALID", f"family {self.label}: dim must be 1 or 2")
        if self.dim == 2 and (self.overrides or self.jordan):
            raise RSFDIError("INVALID", f"family {self.label}: repeated complex modes are not supported")
        ks = [k for k, _ in self.overrides] + [k for k, _ in self.jordan]
        if len(set(ks)) != len(ks):
            raise RSFDIError("INVALID", f"family {self.label}: index declared twice")
        g = np.atleast_2d(np.asarray(self.gram, dtype=float))
        if g.shape == (1, 1):
            if g[0, 0] <= 0:
                raise RSFDIError("INVALID", f"family {self.label}: Gram weight must be positive")
        elif g.shape != (self.dim, self.dim) or not np.allclose(g, g.T) or np.linalg.eigvalsh(g).min() <= 0:
            raise RSFDIError("INVALID", f"family {self.label}: Gram block must be SPD of size dim")

    def block_dim(self, k: int) -> int:
        for kk, d in self.overrides:
            if kk == k:
                return int(d)
        for kk, length in self.jordan:
            if kk == k:
                return int(length)
        return self.dim

    def eigenvalue(self, k: int) -> complex:
        return complex(self.rule(k))

    def block(self, k: int) -> np.ndarray:
        """Real matrix of A on the (generalized) eigenspace of mode k."""
        lam = self.eigenvalue(k)
        if self.dim == 2:
            a, b = lam.real, lam.imag
            return np.array([[a, b], [-b, a]])
        d = self.block_dim(k)
        blk = lam.real * np.eye(d)
        if any(kk == k for kk, _ in self.jordan):
            blk += np.eye(d, k=1)
        return blk

    def gram_block(self, k: int) -> np.ndarray:
        g = np.atleast_2d(np.asarray(self.gram, dtype=float))
        if g.shape == (1, 1):
            return g[0, 0] * np.eye(self.block_dim(k))
        return g

    def n_in_window(self, n_trunc: int) -> int:
        return n_trunc if self.count is None else min(self.count, n_trunc)

    @property
    def special_indices(self) -> list[int]:
        return sorted([k for k, _ in self.overrides] + [k for k, _ in self.jordan])

    def to_json(self) -> dict:
        d = {"label": self.label, "rule": self.rule.to_json(), "dim": self.dim}
        if self.overrides:
            d["overrides"] = [list(x) for x in self.overrides]
        if self.jordan:
            d["jordan"] = [list(x) for x in self.jordan]
        g = np.asarray(self.gram, dtype=float)
        d["gram"] = float(g) if g.ndim == 0 else g.tolist()
        if self.count is not None:
            d["count"] = self.count
        if self.gap_tail_bound is not None:
            d["gap_tail_bound"] = self.gap_tail_bound
        return d

    @staticmethod
    def from_json(d: Mapping) -> "ModeFamily":
        g = d.get("gram", 1.0)
        g = float(g) if np.ndim(g) == 0 else tuple(map(tuple, g))
        return ModeFamily(
            label=str(d["label"]), rule=EigenRule.from_json(d["rule"]), dim=int(d.get("dim", 1)),
            overrides=tuple(tuple(map(int, x)) for x in d.get("overrides", ())),
            jordan=tuple(tuple(map(int, x)) for x in d.get("jordan", ())),
            gram=g, count=d.get("count"), gap_tail_bound=d.get("gap_tail_bound"))


# ---------------------------------------------------------------------------
# vectors


@dataclass(frozen=True)
class TailTerm:
    """Coefficients c / k**p on every mode k >= k0 of one family."""

    family: str
    c: tuple
    p: float
    k0: int = 1

    def __post_init__(self):
        if not self.p > 0.5:
            raise RSFDIError("UNBOUNDED_TAIL", f"tail exponent p={self.p} is not > 1/2, not square summable")
        if self.k0 < 1:
            raise RSFDIError("INVALID", "tail start index must be >= 1")

    @staticmethod
    def make(family: str, c, p: float, k0: int = 1) -> "TailTerm":
        return TailTerm(family, tuple(np.atleast_1d(np.asarray(c, dtype=float)).tolist()), float(p), int(k0))

    def value(self, k: int) -> np.ndarray:
        return np.asarray(self.c) / float(k) ** self.p if k >= self.k0 else np.zeros(len(self.c))


class SpectralVector:
    """Finite coefficient map plus optional c/k^p tails (immutable by convention)."""

    __slots__ = ("entries", "tails")

    def __init__(self, entries: Mapping | None = None, tails: Iterable[TailTerm] = ()):
        ent = {}
        for (fam, k), v in (entries or {}).items():
            arr = np.atleast_1d(np.asarray(v, dtype=float)).copy()
            arr.setflags(write=False)
            if int(k) < 1:
                raise RSFDIError("INVALID", "mode indices start at 1")
            ent[(str(fam), int(k))] = arr
        object.__setattr__(self, "entries", ent)
        object.__setattr__(self, "tails", tuple(tails))

    def __setattr__(self, *_):
        raise AttributeError("SpectralVector is immutable")

    def __reduce__(self):
        return SpectralVector, (dict(self.entries), self.tails)

    def __repr__(self):
        return f"SpectralVector({len(self.entries)} entries, tails={list(self.tails)})"

    @staticmethod
    def unit(family: str, k: int, dim: int = 1, j: int = 0) -> "SpectralVector":
        v = np.zeros(dim)
        v[j] = 1.0
        return SpectralVector({(family, k): v})

    @property
    def has_tail(self) -> bool:
        return bool(self.tails)

    def is_zero(self) -> bool:
        return not self.tails and all(not np.any(v) for v in self.entries.values())

    def coefficient(self, family: str, k: int, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        e = self.entries.get((family, k))
        if e is not None:
            out[: e.size] += e
        for t in self.tails:
            if t.family == family and k >= t.k0:
                out += t.value(k)
        return out

    def scaled(self, a: float) -> "SpectralVector":
        return SpectralVector({key: a * v for key, v in self.entries.items()},
                              [TailTerm(t.family, tuple(a * c for c in t.c), t.p, t.k0) for t in self.tails])

    def __add__(self, other: "SpectralVector") -> "SpectralVector":
        ent = dict(self.entries)
        for key, v in other.entries.items():
            if key in ent:
                n = max(ent[key].size, v.size)
                a = np.zeros(n)
                a[: ent[key].size] += ent[key]
                a[: v.size] += v
                ent[key] = a
            else:
                ent[key] = v
        return SpectralVector(ent, self.tails + other.tails)

    def __rmul__(self, a: float) -> "SpectralVector":
        return self.scaled(float(a))

    def to_json(self) -> dict:
        d = {"entries": [[f, k, v.tolist()] for (f, k), v in sorted(self.entries.items())]}
        if self.tails:
            tl = [{"family": t.family, "form": "c_over_k_pow",
                   "c": t.c[0] if len(t.c) == 1 else list(t.c), "p": t.p, "k0": t.k0} for t in self.tails]
            d["tail"] = tl[0] if len(tl) == 1 else tl
        return d

    @staticmethod
    def from_json(d: Mapping) -> "SpectralVector":
        ent = {}
        for fam, k, v in d.get("entries", ()):
            ent[(str(fam), int(k))] = v
        raw = d.get("tail")
        raw = [] if raw is None else ([raw] if isinstance(raw, Mapping) else list(raw))
        tails = []
        for t in raw:
            if t.get("form", "c_over_k_pow") != "c_over_k_pow":
                raise RSFDIError("INVALID", f"unsupported tail form {t.get('form')!r}")
            tails.append(TailTerm.make(t["family"], t["c"], t["p"], t.get("k0", 1)))
        return SpectralVector(ent, tails)


# ---------------------------------------------------------------------------
# systems and windows


@dataclass(frozen=True)
class Window:
    """Dense whitened coordinates for the first n_trunc modes of every family."""

    n_trunc: int
    families: tuple
    blocks: tuple           # (family index, k, start, dim)
    index: Mapping          # (label, k) -> (start, dim)
    n: int
    A: np.ndarray
    S: np.ndarray           # whitening map, block diagonal Gram square root
    S_inv: np.ndarray
    eigenvalues: np.ndarray  # per block representative eigenvalue
    coord_block: np.ndarray  # coordinate -> block number
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @staticmethod
    def build(families: Sequence[ModeFamily], n_trunc: int) -> "Window":
        blocks, index, start = [], {}, 0
        for fi, fam in enumerate(families):
            for k in range(1, fam.n_in_window(n_trunc) + 1):
                d = fam.block_dim(k)
                blocks.append((fi, k, start, d))
                index[(fam.label, k)] = (start, d)
                start += d
        n = start
        A = np.zeros((n, n))
        S = np.zeros((n, n))
        S_inv = np.zeros((n, n))
        eig = np.zeros(len(blocks), dtype=complex)
        coord_block = np.zeros(n, dtype=int)
        for b, (fi, k, s, d) in enumerate(blocks):
            fam = families[fi]
            G = fam.gram_block(k)
            Sh = np.real(sqrtm(G)) if d > 1 and not np.allclose(G, G[0, 0] * np.eye(d)) else np.sqrt(G[0, 0]) * np.eye(d)
            sl = slice(s, s + d)
            S[sl, sl] = Sh
            S_inv[sl, sl] = np.linalg.inv(Sh)
            A[sl, sl] = Sh @ fam.block(k) @ np.linalg.inv(Sh)
            lam = fam.eigenvalue(k)
            eig[b] = complex(lam.real, abs(lam.imag)) if fam.dim == 2 else complex(lam.real, 0.0)
            coord_block[sl] = b
        return Window(n_trunc, tuple(families), tuple(blocks), index, n, A, S, S_inv, eig, coord_block)

    def coords(self, v: SpectralVector) -> np.ndarray:
        a = np.zeros(self.n)
        for fi, k, s, d in self.blocks:
            c = v.coefficient(self.families[fi].label, k, d)
            a[s: s + d] = c
        return self.S @ a

    def vector(self, z: np.ndarray, tol: float = 0.0) -> SpectralVector:
        a = self.S_inv @ np.asarray(z, dtype=float)
        ent = {}
        for fi, k, s, d in self.blocks:
            seg = a[s: s + d]
            if np.max(np.abs(seg)) > tol:
                ent[(self.families[fi].label, k)] = seg
        return SpectralVector(ent)

    def block_slice(self, b: int) -> slice:
        _, _, s, d = self.blocks[b]
        return slice(s, s + d)

    def block_label(self, b: int) -> tuple:
        fi, k, _, _ = self.blocks[b]
        return self.families[fi].label, k

    def family_blocks(self, label: str) -> list[int]:
        return [b for b, (fi, _, _, _) in enumerate(self.blocks) if self.families[fi].label == label]

    def coords_of_blocks(self, blocks: Iterable[int]) -> np.ndarray:
        idx = [i for b in blocks for i in range(self.blocks[b][2], self.blocks[b][2] + self.blocks[b][3])]
        return np.asarray(sorted(idx), dtype=int)

    def has_tail(self, label: str) -> bool:
        fam = next(f for f in self.families if f.label == label)
        return fam.count is None or fam.count > self.n_trunc

    def eigen_groups(self, tol: float = DEFAULT_TOL.eig) -> list[list[int]]:
        """Blocks grouped by equal eigenvalue (conjugate pairs share one representative)."""
        key = ("groups", tol)
        if key not in self._cache:
            self._cache[key] = self._eigen_groups(tol)
        return [list(g) for g in self._cache[key]]

    def _eigen_groups(self, tol: float) -> list[list[int]]:
        order = np.lexsort((self.eigenvalues.imag, self.eigenvalues.real))
        groups: list[list[int]] = []
        for b in order:
            lam = self.eigenvalues[b]
            if groups:
                ref = self.eigenvalues[groups[-1][0]]
                if abs(lam - ref) <= tol * max(1.0, abs(ref)):
                    groups[-1].append(int(b))
                    continue
            groups.append([int(b)])
        # lexsort puts equal real parts adjacent but may interleave imaginary parts; merge exhaustively
        merged: list[list[int]] = []
        for g in groups:
            for m in merged:
                ref = self.eigenvalues[m[0]]
                if abs(self.eigenvalues[g[0]] - ref) <= tol * max(1.0, abs(ref)):
                    m.extend(g)
                    break
            else:
                merged.append(list(g))
        return merged

    def simple_blocks(self, tol: float = DEFAULT_TOL.eig) -> set[int]:
        """Blocks whose eigenvalue is simple (one real mode or one conjugate pair)."""
        key = ("simple", tol)
        if key in self._cache:
            return set(self._cache[key])
        out = set()
        for g in self.eigen_groups(tol):
            if len(g) == 1:
                fi, k, _, d = self.blocks[g[0]]
                fam = self.families[fi]
                if d == fam.dim and not any(kk == k for kk, _ in fam.jordan):
                    out.add(g[0])
        self._cache[key] = frozenset(out)
        return out


class RieszSpectralSystem:
    """A (mode families), B, C, fault signatures and orthogonality declarations."""

    def __init__(self, families: Sequence[ModeFamily], B: Sequence[SpectralVector] = (),
                 C: Sequence[SpectralVector] = (), faults: Sequence[SpectralVector] = (),
                 orthogonality_facts: Iterable[tuple[int, str]] = (), name: str = "",
                 tol: Tolerances = DEFAULT_TOL):
        self.families = tuple(families)
        if not self.families:
            raise RSFDIError("INVALID", "a system needs at least one mode family")
        labels = [f.label for f in self.families]
        if len(set(labels)) != len(labels):
            raise RSFDIError("INVALID", "family labels must be unique")
        self.B = tuple(B)
        self.C = tuple(C)
        self.faults = tuple(faults)
        self.orthogonality_facts = frozenset((int(j), str(f)) for j, f in orthogonality_facts)
        for j, f in self.orthogonality_facts:
            if not 0 <= j < len(self.C) or f not in labels:
                raise RSFDIError("INVALID", f"orthogonality fact ({j + 1}, {f}) refers to an unknown output or family")
        for v in self.B + self.C + self.faults:
            for fam, _ in v.entries:
                if fam not in labels:
                    raise RSFDIError("INVALID", f"vector refers to unknown family {fam!r}")
            for t in v.tails:
                if t.family not in labels:
                    raise RSFDIError("INVALID", f"tail refers to unknown family {t.family!r}")
        self.name = name
        self.tol = tol
        self._windows: dict[int, Window] = {}

    @property
    def q(self) -> int:
        return len(self.C)

    @property
    def m(self) -> int:
        return len(self.B)

    @property
    def p(self) -> int:
        return len(self.faults)

    def family(self, label: str) -> ModeFamily:
        for f in self.families:
            if f.label == label:
                return f
        raise KeyError(label)

    def window(self, n_trunc: int) -> Window:
        if n_trunc < 1:
            raise RSFDIError("INVALID", "truncation order must be >= 1")
        w = self._windows.get(n_trunc)
        if w is None:
            w = Window.build(self.families, n_trunc)
            self._windows[n_trunc] = w
        return w

    def dense(self, n_trunc: int) -> "DenseModel":
        w = self.window(n_trunc)
        cols = lambda vs, k: np.column_stack([w.coords(v) for v in vs]) if vs else np.zeros((w.n, 0))
        C = cols(self.C, 0).T if self.C else np.zeros((0, w.n))
        return DenseModel(w, w.A.copy(), cols(self.B, 0), C, cols(self.faults, 0))

    def with_outputs(self, rows: Sequence[int]) -> "RieszSpectralSystem":
        rows = list(rows)
        facts = [(rows.index(j), f) for j, f in self.orthogonality_facts if j in rows]
        return RieszSpectralSystem(self.families, self.B, [self.C[j] for j in rows], self.faults,
                                   facts, self.name, self.tol)

    def with_faults(self, faults: Sequence[SpectralVector]) -> "RieszSpectralSystem":
        return RieszSpectralSystem(self.families, self.B, self.C, faults,
                                   self.orthogonality_facts, self.name, self.tol)

    # -- tail knowledge ----------------------------------------------------
    def output_tail_status(self, j: int, label: str, n_trunc: int) -> str:
        """What is known about <c_j, phi_k> for modes k beyond the window.

        ZERO: declared orthogonal, or c_j has no coefficient there.  NONZERO:
        a nonvanishing c/k^p tail with no explicit entries beyond the window.
        UNKNOWN otherwise.
        """
        w = self.window(n_trunc)
        if not w.has_tail(label):
            return "ZERO"
        if (j, label) in self.orthogonality_facts:
            return "ZERO"
        c = self.C[j]
        tails = [t for t in c.tails if t.family == label and any(x != 0 for x in t.c)]
        beyond = [k for (f, k) in c.entries if f == label and k > n_trunc]
        if not tails and not beyond:
            return "ZERO"
        if len(tails) == 1 and not beyond:
            return "NONZERO"
        return "UNKNOWN"

    # -- serialization -----------------------------------------------------
    def to_json(self) -> dict:
        return {
            "name": self.name,
            "families": [f.to_json() for f in self.families],
            "B": [v.to_json() for v in self.B],
            "C": [v.to_json() for v in self.C],
            "faults": [v.to_json() for v in self.faults],
            "orthogonality_facts": [{"output": j + 1, "family": f} for j, f in sorted(self.orthogonality_facts)],
        }

    @staticmethod
    def from_json(d: Mapping) -> "RieszSpectralSystem":
        try:
            fams = [ModeFamily.from_json(f) for f in d["families"]]
            vec = lambda key: [SpectralVector.from_json(v) for v in d.get(key, ())]
            facts = [(int(x["output"]) - 1, str(x["family"])) for x in d.get("orthogonality_facts", ())]
            return RieszSpectralSystem(fams, vec("B"), vec("C"), vec("faults"), facts, d.get("name", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise RSFDIError("INVALID", f"malformed system description: {exc}") from exc


def load_system(source) -> RieszSpectralSystem:
    """Load a system from a path, a JSON string or an already parsed dict."""
    if isinstance(source, Mapping):
        return RieszSpectralSystem.from_json(source)
    text = str(source)
    if text.lstrip().startswith("{"):
        try:
            return RieszSpectralSystem.from_json(json.loads(text))
        except json.JSONDecodeError as exc:
            raise RSFDIError("INVALID", f"system is not valid JSON: {exc}") from exc
    try:
        with open(text, encoding="utf-8") as fh:
            return RieszSpectralSystem.from_json(json.load(fh))
    except OSError as exc:
        raise RSFDIError("IO", f"cannot read system file {text}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RSFDIError("INVALID", f"system file {text} is not valid JSON: {exc}") from exc


@dataclass
class DenseModel:
    """Whitened window matrices: x' = A x + B u + L f, y = C x."""

    window: Window
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    L: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    repeated: list
    finitely_many_repeats: bool
    sup_re: float
    gap_partial_sum: float
    gap_tail_bound: float | None
    facts: dict
    checks: dict

    @property
    def ok(self) -> bool:
        return all(v == "PASS" for v in self.checks.values())

    def to_json(self) -> dict:
        return {"repeated": [[list(a), list(b)] for a, b in self.repeated],
                "finitely_many_repeats": self.finitely_many_repeats,
                "sup_re": self.sup_re, "gap_partial_sum": self.gap_partial_sum,
                "gap_tail_bound": self.gap_tail_bound, "facts": self.facts, "checks": self.checks,
                "ok": self.ok}


def _family_gaps(fam: ModeFamily, n: int) -> tuple[np.ndarray, int]:
    """Distance from each mode to the nearest other mode of the same family."""
    n_eff = fam.n_in_window(n)
    k = np.arange(1, n_eff + 2 if fam.count is None else n_eff + 1)
    lam = fam.rule(k)
    if fam.dim == 2:
        lam = lam.real + 1j * np.abs(lam.imag)
    d = np.full(n_eff, np.inf)
    order = np.argsort(lam.real, kind="stable")
    # nearest neighbour by brute force on small windows, sorted scan otherwise
    if lam.size <= 2000:
        diff = np.abs(lam[:n_eff, None] - lam[None, :])
        diff[np.arange(n_eff), np.arange(n_eff)] = np.inf
        diff[diff == 0] = np.inf
        d = diff.min(axis=1)
    else:
        srt = lam[order]
        gaps = np.abs(np.diff(srt))
        left = np.r_[np.inf, gaps]
        right = np.r_[gaps, np.inf]
        dd = np.minimum(left, right)
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        d = dd[inv][:n_eff]
    return d, n_eff


def _gap_tail(fam: ModeFamily, n: int) -> float | None:
    """Bound on sum_{k>n} 1/d_k^2 by rule inspection (inf if divergent)."""
    if fam.count is not None and fam.count <= n:
        return 0.0
    if fam.gap_tail_bound is not None:
        return float(fam.gap_tail_bound)
    if fam.rule.kind == "log":
        return math.inf
    deg = fam.rule.degree
    if deg is None:
        return None
    if deg <= 1:
        return math.inf
    ks = np.arange(n + 1, 2 * n + 3, dtype=float)
    lam = fam.rule(np.r_[ks, 2 * n + 3])
    g = np.abs(np.diff(lam))
    # d_k >= c k^(deg-1) for k > n; the constant is taken from the window [n+1, 2n+2]
    c = float(np.min(g / ks ** (deg - 1))) * 0.5
    s = 2 * (deg - 1)
    return float(zeta(s, n + 1)) / c ** 2


def validate_regular_rs(sys: RieszSpectralSystem, n_trunc: int = 200) -> ValidationReport:
    """Repeated eigenvalues, well-posedness and the per-family gap condition."""
    if n_trunc < 1:
        raise RSFDIError("INVALID", "truncation order must be >= 1")
    tol = sys.tol
    # infinitely many collisions by rule inspection
    fams = sys.families
    for i, f in enumerate(fams):
        if f.count is None and f.rule.kind == "poly" and f.rule.degree == 0:
            raise RSFDIError("REJECT", f"family {f.label}: constant rule repeats one eigenvalue infinitely often")
        for g in fams[i + 1:]:
            if f.count is None and g.count is None and f.rule.kind == g.rule.kind == "poly":
                pf, pg = f.rule.poly_coeffs(), g.rule.poly_coeffs()
                n = max(pf.size, pg.size)
                diff = np.pad(pf, (0, n - pf.size)) - np.pad(pg, (0, n - pg.size))
                if np.all(np.abs(diff) <= tol.eig):
                    raise RSFDIError("REJECT", f"families {f.label} and {g.label} share every eigenvalue")
    sup_re = -math.inf
    for f in fams:
        s = f.rule.sup_re_beyond(0) if f.count is None else None
        if s is not None and math.isinf(s) and s > 0:
            raise RSFDIError("REJECT", f"family {f.label}: Re lambda_k is unbounded above")
        nw = f.n_in_window(n_trunc)
        win = float(np.max(f.rule(np.arange(1, nw + 1)).real))
        sup_re = max(sup_re, win, s if s is not None else -math.inf)
    w = sys.window(n_trunc)
    repeated = []
    for g in w.eigen_groups(tol.eig):
        if len(g) > 1:
            repeated.append((w.block_label(g[0]), w.block_label(g[1])))
        for b in g:
            fi, k, _, d = w.blocks[b]
            if k in fams[fi].special_indices and (w.block_label(b), w.block_label(b)) not in repeated:
                repeated.append((w.block_label(b), w.block_label(b)))
    declared = {(f.label, k) for f in fams for k in f.special_indices}
    finite = all(a in declared or b in declared or a[1] < n_trunc or b[1] < n_trunc for a, b in repeated)
    gap_sum, tails, gap_ok = 0.0, 0.0, True
    for f in fams:
        d, _ = _family_gaps(f, n_trunc)
        special = set(f.special_indices)
        keep = np.array([k not in special for k in range(1, d.size + 1)], dtype=bool)
        gap_sum += float(np.sum(1.0 / d[keep] ** 2))
        tb = _gap_tail(f, n_trunc)
        if tb is None:
            tails = None
            if gap_ok:
                gap_ok = None
        elif tails is not None:
            tails += tb
            if math.isinf(tb):
                gap_ok = False
    facts = {}
    for j, lab in sorted(sys.orthogonality_facts):
        cj = w.coords(sys.C[j])
        cols = w.coords_of_blocks(w.family_blocks(lab))
        worst = float(np.max(np.abs(cj[cols]))) if cols.size else 0.0
        facts[f"c{j + 1} _|_ {lab}"] = worst
        if worst > tol.ip:
            raise RSFDIError("INVALID", f"declared orthogonality c{j + 1} _|_ {lab} fails: |<c,phi>| = {worst:.3e}")
    checks = {
        "finitely_many_repeats": "PASS" if finite else "FAIL",
        "well_posed": "PASS" if math.isfinite(sup_re) else "FAIL",
        "gap_condition": "PASS" if gap_ok is True else ("UNVERIFIED" if gap_ok is None else "FAIL"),
        "orthogonality_facts": "PASS",
    }
    return ValidationReport(repeated, finite, float(sup_re), gap_sum, tails, facts, checks)


# ---------------------------------------------------------------------------
# operator actions


def _rule_poly(fam: ModeFamily) -> np.ndarray | None:
    if fam.rule.kind != "poly":
        return None
    return fam.rule.poly_coeffs()


def _tail_times_block(fam: ModeFamily, t: TailTerm) -> list[TailTerm]:
    """Tail of A applied to a c/k^p tail: expands lambda(k)*c/k^p into c'/k^p' terms."""
    coeffs = _rule_poly(fam)
    if coeffs is None:
        raise RSFDIError("UNBOUNDED_TAIL", f"family {fam.label}: tail action needs a polynomial rule")
    c = np.asarray(t.c, dtype=float)
    out = []
    for i, a in enumerate(coeffs):
        if a == 0:
            continue
        if fam.dim == 2:
            blk = np.array([[a.real, a.imag], [-a.imag, a.real]])
            ci = blk @ c
        else:
            ci = a.real * c
        if not np.any(ci):
            continue
        p = t.p - i
        if not p > 0.5:
            raise RSFDIError("UNBOUNDED_TAIL", f"lambda(k) * c/k^{t.p} is not square summable; vector is outside dom A")
        out.append(TailTerm(t.family, tuple(ci.tolist()), p, t.k0))
    return out


def _special_in_tail(fam: ModeFamily, t: TailTerm) -> list[int]:
    return [k for k in fam.special_indices if k >= t.k0]


def apply_A(sys: RieszSpectralSystem, v: SpectralVector) -> SpectralVector:
    """Blockwise action of A on biorthogonal coefficients."""
    ent = {}
    keys = set(v.entries)
    tails = []
    for t in v.tails:
        fam = sys.family(t.family)
        for k in _special_in_tail(fam, t):
            keys.add((t.family, k))
        tails.extend(_tail_times_block(fam, t))
    for fam_label, k in keys:
        fam = sys.family(fam_label)
        d = fam.block_dim(k)
        e = v.entries.get((fam_label, k))
        c = np.zeros(d) if e is None else np.pad(e, (0, max(0, d - e.size)))[:d]
        special = k in fam.special_indices
        if special:
            c = v.coefficient(fam_label, k, d)
        out = fam.block(k) @ c
        if special:
            # the tail already contributes its diagonal action; remove it here
            for t in v.tails:
                if t.family == fam_label and k >= t.k0:
                    out -= fam.eigenvalue(k).real * t.value(k) if fam.dim == 1 else fam.block(k) @ t.value(k)
        if np.any(out):
            ent[(fam_label, k)] = out
    return SpectralVector(ent, tails)


def resolvent_apply(sys: RieszSpectralSystem, lam: float, v: SpectralVector,
                    n_trunc: int = 200) -> SpectralVector:
    """(lam I - A)^{-1} v, blockwise.  Tails are supported for affine_ksq-type rules only via truncation."""
    tol = sys.tol.eig
    for fam in sys.families:
        nw = fam.n_in_window(n_trunc)
        ev = fam.rule(np.arange(1, nw + 1))
        if np.any(np.abs(ev - lam) <= tol * max(1.0, abs(lam))):
            raise RSFDIError("SPECTRUM_HIT", f"{lam} is an eigenvalue of family {fam.label}")
        s = fam.rule.sup_re_beyond(nw) if fam.count is None else None
        if s is not None and fam.count is None and fam.rule.kind == "poly":
            # beyond the window a polynomial rule is monotone once past its critical points
            if abs(s - lam) <= tol and fam.rule.degree >= 1:
                raise RSFDIError("SPECTRUM_HIT", f"{lam} is an eigenvalue of family {fam.label}")
    if v.tails:
        raise RSFDIError("UNBOUNDED_TAIL", "resolvent action on tails is not represented in closed form")
    ent = {}
    for (fam_label, k), e in v.entries.items():
        fam = sys.family(fam_label)
        d = fam.block_dim(k)
        M = lam * np.eye(d) - fam.block(k)
        c = np.pad(e, (0, max(0, d - e.size)))[:d]
        ent[(fam_label, k)] = np.linalg.solve(M, c)
    return SpectralVector(ent)


def inner_product_with_bound(c: SpectralVector, v: SpectralVector,
                             sys: RieszSpectralSystem | None = None) -> tuple[float, float]:
    """<c, v> under the Gram data, summed in closed form; returns (value, tail bound).

    Entries contribute exactly, entry x tail pairs exactly, and tail x tail
    pairs through the Hurwitz zeta function, so the bound is always 0.
    """
    def gram(fam_label, k, d):
        if sys is None:
            return np.eye(d)
        fam = sys.family(fam_label)
        G = fam.gram_block(k)
        return G if G.shape[0] == d else np.eye(d) * G[0, 0]

    total = 0.0
    for key, a in c.entries.items():
        b = v.entries.get(key)
        if b is not None:
            d = max(a.size, b.size)
            total += float(np.pad(a, (0, d - a.size)) @ gram(*key, d) @ np.pad(b, (0, d - b.size)))
    for x, y in ((c, v), (v, c)):
        for (fam, k), a in x.entries.items():
            for t in y.tails:
                if t.family == fam and k >= t.k0:
                    tv = t.value(k)
                    d = max(a.size, tv.size)
                    total += float(np.pad(a, (0, d - a.size)) @ gram(fam, k, d) @ np.pad(tv, (0, d - tv.size)))
    for t in c.tails:
        for s in v.tails:
            if t.family != s.family:
                continue
            k0 = max(t.k0, s.k0)
            d = max(len(t.c), len(s.c))
            G = gram(t.family, k0, d)
            if sys is not None and sys.family(t.family).special_indices:
                # special blocks may carry a different Gram size; sum them explicitly
                pass
            w = float(np.pad(np.asarray(t.c), (0, d - len(t.c))) @ G @ np.pad(np.asarray(s.c), (0, d - len(s.c))))
            fam = None if sys is None else sys.family(t.family)
            if fam is not None and fam.count is not None:
                ks = np.arange(k0, fam.count + 1, dtype=float)
                total += w * float(np.sum(ks ** -(t.p + s.p)))
            else:
                total += w * float(zeta(t.p + s.p, k0))
    return total, 0.0


def inner_product(c: SpectralVector, v: SpectralVector, sys: RieszSpectralSystem | None = None) -> float:
    return inner_product_with_bound(c, v, sys)[0]


def output_map(sys: RieszSpectralSystem, x: SpectralVector) -> np.ndarray:
    return np.array([inner_product(c, x, sys) for c in sys.C])


def tail_norm(sys: RieszSpectralSystem, v: SpectralVector, n_trunc: int) -> float:
    """Norm of the part of v living on modes beyond the window."""
    w = sys.window(n_trunc)
    head = w.vector(w.coords(v))
    resid = v + head.scaled(-1.0)
    val = inner_product(resid, resid, sys)
    return math.sqrt(max(val, 0.0))
