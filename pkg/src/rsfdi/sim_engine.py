"""Spectral Galerkin simulation of the faulty plant and its detection filters.

The plant is advanced mode by mode with the exact exponential update under a
zero-order hold; filters use the matching block (Van Loan) discretization.
Noise is white: each step draws sqrt(var * dt) * N(0, 1) per mode coefficient
and per output (``noise_scaling = "unit"`` drops the sqrt(dt)).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import expm

from .config import AnalysisConfig, SimConfig
from .errors import RSFDIError
from .fdi_synthesis import DetectionFilter, synthesize
from .spectral_core import RieszSpectralSystem

PROFILES = ("step", "ramp")


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class FaultEvent:
    index: int          # 0-based fault number
    onset: float
    severity: float
    profile: str = "step"  # ramp: severity is a rate per second

    def value(self, t: np.ndarray) -> np.ndarray:
        on = t >= self.onset - 1e-12
        if self.profile == "step":
            return np.where(on, self.severity, 0.0)
        return np.where(on, self.severity * (t - self.onset), 0.0)


@dataclass(frozen=True)
class Scenario:
    T: float = 10.0
    dt: float = 1e-3
    inputs: tuple = ()            # ((t0, (u_1..u_m)), ...) piecewise constant from t0 on
    faults: tuple = ()            # FaultEvent
    process_var: float | Mapping = 0.0   # scalar or {family: variance}
    meas_var: float | Sequence = 0.0     # scalar or per output
    seed: int | None = None

    def __post_init__(self):
        if not self.dt > 0 or not self.T > 0:
            raise RSFDIError("INVALID", "T and dt must be positive", T=self.T, dt=self.dt)
        for ev in self.faults:
            if not 0 <= ev.onset <= self.T:
                raise RSFDIError("INVALID", f"fault onset {ev.onset} outside [0, T]")
            if ev.profile not in PROFILES:
                raise RSFDIError("INVALID", f"unknown fault profile {ev.profile!r}")
        pv = self.process_var.values() if isinstance(self.process_var, Mapping) else [self.process_var]
        mv = self.meas_var if isinstance(self.meas_var, Sequence) else [self.meas_var]
        if any(v < 0 for v in list(pv) + list(mv)):
            raise RSFDIError("INVALID", "noise variances must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.T / self.dt + 1e-9))

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def noiseless(self) -> bool:
        pv = self.process_var.values() if isinstance(self.process_var, Mapping) else [self.process_var]
        mv = self.meas_var if isinstance(self.meas_var, Sequence) else [self.meas_var]
        return not any(pv) and not any(mv)

    def healthy(self) -> "Scenario":
        return replace(self, faults=())

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))

    def without_noise(self) -> "Scenario":
        return replace(self, process_var=0.0, meas_var=0.0)

    def to_json(self) -> dict:
        return {"T": self.T, "dt": self.dt,
                "inputs": [[t, list(u)] for t, u in self.inputs],
                "faults": [asdict(f) for f in self.faults],
                "process_var": dict(self.process_var) if isinstance(self.process_var, Mapping) else self.process_var,
                "meas_var": list(self.meas_var) if isinstance(self.meas_var, Sequence) else self.meas_var,
                "seed": self.seed}

    @staticmethod
    def from_json(d: Mapping) -> "Scenario":
        try:
            faults = tuple(FaultEvent(int(f["index"]), float(f["onset"]), float(f["severity"]),
                                      f.get("profile", "step")) for f in d.get("faults", ()))
            inputs = tuple((float(t), tuple(float(x) for x in u)) for t, u in d.get("inputs", ()))
            pv = d.get("process_var", 0.0)
            mv = d.get("meas_var", 0.0)
            return Scenario(float(d.get("T", 10.0)), float(d.get("dt", 1e-3)), inputs, faults,
                            dict(pv) if isinstance(pv, Mapping) else float(pv),
                            tuple(float(v) for v in mv) if isinstance(mv, Sequence) else float(mv),
                            d.get("seed"))
        except (KeyError, TypeError, ValueError) as exc:
            raise RSFDIError("INVALID", f"malformed scenario: {exc}") from exc


def load_scenario(source) -> Scenario:
    if isinstance(source, Scenario):
        return source
    if isinstance(source, Mapping):
        return Scenario.from_json(source)
    try:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        data = json.loads(text)
    except OSError as exc:
        raise RSFDIError("IO", f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RSFDIError("INVALID", f"scenario is not valid JSON: {exc}") from exc
    return Scenario.from_json(data)


# ---------------------------------------------------------------------------
# discretization


def mode_step(lam: float, dt: float) -> tuple[float, float]:
    """(e^{lam dt}, (e^{lam dt} - 1)/lam) with a series for tiny |lam dt|."""
    z = lam * dt
    a = math.exp(z)
    if abs(z) < 1e-8:
        b = dt * (1.0 + z / 2.0 + z * z / 6.0)
    else:
        b = math.expm1(z) / lam
    return a, b


def van_loan(A: np.ndarray, Bm: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH discretization: x+ = Phi x + Gamma u."""
    n, m = A.shape[0], Bm.shape[1]
    Z = np.zeros((n + m, n + m))
    Z[:n, :n] = A * dt
    Z[:n, n:] = Bm * dt
    E = expm(Z)
    return E[:n, :n], E[:n, n:]


@dataclass(frozen=True)
class _Plant:
    Phi: np.ndarray
    Gam: np.ndarray          # maps forcing (whitened coordinates) over one step
    C: np.ndarray
    B: np.ndarray
    L: np.ndarray
    S: np.ndarray            # coefficient -> whitened coordinates
    noise_std: np.ndarray    # per coefficient, before whitening


def _plant(sys: RieszSpectralSystem, n_modes: int, sc: Scenario, scaling: str) -> _Plant:
    dm = sys.dense(n_modes)
    w = dm.window
    n = w.n
    Phi = np.zeros((n, n))
    Gam = np.zeros((n, n))
    std = np.zeros(n)
    for fi, k, s, d in w.blocks:
        sl = slice(s, s + d)
        blk = w.A[sl, sl]
        if d == 1:
            a, b = mode_step(float(blk[0, 0]), sc.dt)
            Phi[s, s], Gam[s, s] = a, b
        else:
            Phi[sl, sl], Gam[sl, sl] = van_loan(blk, np.eye(d), sc.dt)
        lab = w.families[fi].label
        var = sc.process_var.get(lab, 0.0) if isinstance(sc.process_var, Mapping) else sc.process_var
        std[sl] = math.sqrt(var * (sc.dt if scaling == "sqrt_dt" else 1.0))
    return _Plant(Phi, Gam, dm.C, dm.B, dm.L, w.S, std)


@dataclass(frozen=True)
class _DiscreteFilter:
    Phi: np.ndarray
    Gu: np.ndarray
    Gy: np.ndarray
    H: np.ndarray
    M: np.ndarray


def _discretize_filter(f: DetectionFilter, dt: float) -> _DiscreteFilter:
    Bm = np.hstack([f.G, -f.E])
    Phi, Gam = van_loan(f.F, Bm, dt)
    m = f.G.shape[1]
    return _DiscreteFilter(Phi, Gam[:, :m], Gam[:, m:], f.H, f.M)


def _input_table(sc: Scenario, m: int) -> np.ndarray:
    t = sc.time
    U = np.zeros((t.size, m))
    for t0, u in sorted(sc.inputs):
        if len(u) != m:
            raise RSFDIError("INVALID", f"input row has {len(u)} entries, system has {m} inputs")
        U[t >= t0 - 1e-12] = np.asarray(u, dtype=float)
    return U


def _fault_table(sc: Scenario, p: int) -> np.ndarray:
    t = sc.time
    Fm = np.zeros((t.size, p))
    for ev in sc.faults:
        if not 0 <= ev.index < p:
            raise RSFDIError("INVALID", f"fault index {ev.index + 1} out of range 1..{p}")
        Fm[:, ev.index] += ev.value(t)
    return Fm


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class ResidualTrace:
    index: int
    time: np.ndarray
    residual: np.ndarray     # signed r_i(t); one output column per row of H
    threshold: float | None = None
    detection_time: float | None = None

    @property
    def magnitude(self) -> np.ndarray:
        r = self.residual
        return np.abs(r[:, 0]) if r.shape[1] == 1 else np.linalg.norm(r, axis=1)

    def with_threshold(self, th: float, n_persist: int = 3) -> "ResidualTrace":
        return replace(self, threshold=float(th), detection_time=first_persistent_crossing(self.time, self.magnitude, th, n_persist))


@dataclass(frozen=True)
class SimulationResult:
    time: np.ndarray
    y: np.ndarray
    traces: tuple
    scenario: Scenario
    n_modes: int
    state: np.ndarray | None = None

    def to_csv(self, path, thresholds: Sequence[float] | None = None) -> None:
        write_trace_csv(path, self, thresholds)


def simulate(sys: RieszSpectralSystem, filters: Sequence[DetectionFilter], scenario: Scenario,
             n_modes: int | None = None, cfg: SimConfig | None = None, store_state: bool = False) -> SimulationResult:
    """Run plant plus filters; the plant window matches the filters' window."""
    cfg = cfg or SimConfig()
    sc = scenario
    filters = list(filters)
    if filters:
        nf = {f.P.window.n_trunc for f in filters}
        if len(nf) != 1 or (n_modes is not None and n_modes not in nf):
            raise RSFDIError("INVALID", "filters and plant must share one truncation", filters=sorted(nf), plant=n_modes)
        n_modes = nf.pop()
    n_modes = n_modes or cfg.n_modes
    idx = [f.index for f in filters]
    if len(set(idx)) != len(idx):
        raise RSFDIError("INVALID", "filters must target distinct faults")

    pl = _plant(sys, n_modes, sc, cfg.noise_scaling)
    dfs = [_discretize_filter(f, sc.dt) for f in filters]
    t = sc.time
    N = t.size
    U = _input_table(sc, sys.m)
    Fv = _fault_table(sc, sys.p)
    rng = np.random.default_rng(sc.seed)
    n = pl.Phi.shape[0]
    q = pl.C.shape[0]
    mv = np.broadcast_to(np.asarray(sc.meas_var, dtype=float), (q,)) if q else np.zeros(0)
    mstd = np.sqrt(mv * (sc.dt if cfg.noise_scaling == "sqrt_dt" else 1.0))
    if np.any(pl.noise_std):
        Wn = rng.standard_normal((N, n)) * pl.noise_std
        Wn = Wn @ pl.S.T   # coefficient noise to whitened coordinates
    else:
        Wn = None
    Vn = rng.standard_normal((N, q)) * mstd if np.any(mstd) else None

    # deterministic forcing per step, then one linear recursion
    forcing = U @ pl.B.T + Fv @ pl.L.T
    if Wn is not None:
        forcing = forcing + Wn
    X = np.empty((N, n))
    x = np.zeros(n)
    GamF = forcing @ pl.Gam.T
    for k in range(N):
        X[k] = x
        x = pl.Phi @ x + GamF[k]
    Y = X @ pl.C.T
    if Vn is not None:
        Y = Y + Vn
    if not np.all(np.isfinite(Y)):
        raise RSFDIError("NONFINITE", "plant trajectory overflowed")

    traces = []
    for f, df in zip(filters, dfs):
        drive = U @ df.Gu.T + Y @ df.Gy.T
        Wf = np.empty((N, df.Phi.shape[0]))
        om = np.zeros(df.Phi.shape[0])
        for k in range(N):
            Wf[k] = om
            om = df.Phi @ om + drive[k]
        R = Y @ df.H.T - Wf @ df.M.T
        if not np.all(np.isfinite(R)):
            raise RSFDIError("NONFINITE", f"residual {f.index + 1} overflowed")
        traces.append(ResidualTrace(f.index, t, R))
    return SimulationResult(t, Y, tuple(traces), sc, n_modes, X if store_state else None)


# ---------------------------------------------------------------------------
# thresholds and decisions


def first_persistent_crossing(time: np.ndarray, mag: np.ndarray, th: float, n_persist: int) -> float | None:
    """Start time of the first run of n_persist consecutive samples above th."""
    above = np.asarray(mag) > th
    if n_persist <= 1:
        hits = np.flatnonzero(above)
        return float(time[hits[0]]) if hits.size else None
    run = np.convolve(above.astype(int), np.ones(n_persist, dtype=int), "valid")
    hits = np.flatnonzero(run == n_persist)
    return float(time[hits[0]]) if hits.size else None


@dataclass(frozen=True)
class ThresholdSet:
    values: tuple
    runs: int
    seeds: tuple
    per_run: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    method: str = "max-over-healthy-runs"

    def to_json(self) -> dict:
        return {"values": list(self.values), "method": self.method, "runs": self.runs,
                "seeds": list(self.seeds), "per_run_max": self.per_run.tolist()}


def _healthy_max(args) -> list:
    sys, filters, sc, cfg, seeds = args
    out = []
    for s in seeds:
        res = simulate(sys, filters, sc.with_seed(s), cfg=cfg)
        out.append([float(tr.magnitude.max()) for tr in res.traces])
    return out


def monte_carlo_thresholds(sys: RieszSpectralSystem, filters: Sequence[DetectionFilter], scenario: Scenario,
                           M: int = 70, base_seed: int = 0, jobs: int = 1,
                           cfg: SimConfig | None = None) -> ThresholdSet:
    """threshold_i = max over M healthy runs (seeds base_seed..base_seed+M-1) of max_t |r_i|."""
    if M < 1:
        raise RSFDIError("INVALID", "need at least one Monte Carlo run")
    cfg = cfg or SimConfig()
    sc = scenario.healthy()
    seeds = [base_seed + j for j in range(M)]
    chunks = [seeds[i: i + cfg.chunk] for i in range(0, M, cfg.chunk)]
    tasks = [(sys, tuple(filters), sc, cfg, c) for c in chunks]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as ex:
            parts = list(ex.map(_healthy_max, tasks))
    else:
        parts = [_healthy_max(t) for t in tasks]
    per_run = np.array([row for part in parts for row in part]).reshape(M, len(filters))
    return ThresholdSet(tuple(float(v) for v in per_run.max(axis=0)) if len(filters) else (), M, tuple(seeds), per_run)


@dataclass(frozen=True)
class Decision:
    index: int
    threshold: float
    detection_time: float | None
    onset: float | None

    @property
    def fired(self) -> bool:
        return self.detection_time is not None

    @property
    def delay(self) -> float | None:
        if self.detection_time is None or self.onset is None:
            return None
        return self.detection_time - self.onset


@dataclass(frozen=True)
class DecisionTable:
    rows: tuple
    n_persist: int

    @property
    def fired(self) -> tuple:
        return tuple(r.index for r in self.rows if r.fired)

    def row(self, index: int) -> Decision:
        return next(r for r in self.rows if r.index == index)

    def to_json(self) -> dict:
        return {"n_persist": self.n_persist, "isolated": [i + 1 for i in self.fired],
                "rows": [{"fault": r.index + 1, "threshold": r.threshold, "onset": r.onset,
                          "detection_time": r.detection_time, "delay": r.delay} for r in self.rows]}


def detect(traces: Sequence[ResidualTrace], thresholds, n_persist: int = 3,
           onsets: Mapping | None = None) -> DecisionTable:
    """Persistent threshold crossing per residual; onsets (by fault index) give delays."""
    vals = thresholds.values if isinstance(thresholds, ThresholdSet) else tuple(thresholds)
    if len(vals) != len(traces):
        raise RSFDIError("INVALID", "one threshold per trace is required")
    onsets = onsets or {}
    rows = []
    for tr, th in zip(traces, vals):
        # a residual only reports the fault after its onset, so search from there
        t0 = onsets.get(tr.index)
        mask = tr.time >= t0 - 1e-12 if t0 is not None else np.ones(tr.time.size, bool)
        dt_ = first_persistent_crossing(tr.time[mask], tr.magnitude[mask], th, n_persist)
        rows.append(Decision(tr.index, float(th), dt_, t0))
    return DecisionTable(tuple(rows), n_persist)


def onsets_of(sc: Scenario) -> dict:
    out: dict = {}
    for ev in sc.faults:
        out[ev.index] = min(out.get(ev.index, math.inf), ev.onset)
    return out


# ---------------------------------------------------------------------------
# helpers


def build_filters(sys: RieszSpectralSystem, n_modes: int, indices: Sequence[int] | None = None,
                  cfg: AnalysisConfig | None = None) -> list[DetectionFilter]:
    """Filters synthesized on the simulation window; the undecided tail stays in the quotient."""
    cfg = replace(cfg or AnalysisConfig(), n_trunc=n_modes, allow_unverified=True)
    idx = range(sys.p) if indices is None else indices
    return [synthesize(sys, i, cfg)[0] for i in idx]


def convergence_report(sys: RieszSpectralSystem, scenario: Scenario, n_modes: int = 50,
                       indices: Sequence[int] | None = None, cfg: SimConfig | None = None) -> dict:
    """Noiseless rerun at 2x modes; max deviation of outputs and residuals."""
    sc = scenario.without_noise()
    runs = {}
    for n in (n_modes, 2 * n_modes):
        fl = build_filters(sys, n, indices)
        runs[n] = simulate(sys, fl, sc, cfg=cfg)
    a, b = runs[n_modes], runs[2 * n_modes]
    return {"n_modes": n_modes, "n_modes_doubled": 2 * n_modes,
            "max_output_deviation": float(np.max(np.abs(a.y - b.y))) if a.y.size else 0.0,
            "max_residual_deviation": [float(np.max(np.abs(ta.residual - tb.residual)))
                                       for ta, tb in zip(a.traces, b.traces)]}


def trace_csv(res: SimulationResult, thresholds: Sequence[float] | None = None) -> str:
    """Columns: time, y_1..y_q, r_1..r_p, flags (bit i set while |r_i| exceeds its threshold)."""
    q = res.y.shape[1]
    cols = ["time"] + [f"y{j + 1}" for j in range(q)] + [f"r{tr.index + 1}" for tr in res.traces] + ["flags"]
    R = [tr.residual[:, 0] if tr.residual.shape[1] == 1 else tr.magnitude for tr in res.traces]
    flags = np.zeros(res.time.size, dtype=int)
    if thresholds is not None:
        for bit, (tr, th) in enumerate(zip(res.traces, thresholds)):
            flags |= (tr.magnitude > th).astype(int) << bit
    lines = [",".join(cols)]
    for k in range(res.time.size):
        row = [res.time[k], *res.y[k], *(r[k] for r in R)]
        lines.append(",".join(repr(float(v)) for v in row) + f",{flags[k]}")
    return "\n".join(lines) + "\n"


def write_trace_csv(path, res: SimulationResult, thresholds: Sequence[float] | None = None) -> None:
    Path(path).write_text(trace_csv(res, thresholds))
