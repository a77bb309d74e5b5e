"""Command-line front end.

Every command is a library function returning ``{relative path: text}``; the
CLI only parses flags, writes those files and maps errors to exit codes.

Exit codes: 0 ok, 2 validation, 3 undecided tail, 4 synthesis or simulation,
5 I/O.  Failures print a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys as _sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .config import AnalysisConfig, SimConfig
from .errors import RSFDIError
from .fdi_synthesis import STRATEGIES, observer_gain, quotient_system
from .geometric_invariants import check_fdi_necessary, min_unobservability_subspace
from .sim_engine import (FaultEvent, Scenario, build_filters, convergence_report, detect, load_scenario,
                         monte_carlo_thresholds, onsets_of, simulate, trace_csv)
from .spectral_core import RieszSpectralSystem, load_system, validate_regular_rs

EXIT = {"OK": 0, "VALIDATION": 2, "UNVERIFIED_TAIL": 3, "SYNTHESIS": 4, "IO": 5}
_VALIDATION = {"INVALID", "REJECT", "UNBOUNDED_TAIL", "SPECTRUM_HIT", "DOMAIN_VIOLATION", "INCOMPATIBLE_TRUNCATION"}
_IO = {"IO"}

# severity rows of the delay study: (f1, f2)
SEVERITY_ROWS = ((2.0, -1.0), (0.5, 0.5), (0.09, 0.2), (0.05, 0.15))


def exit_code(err: RSFDIError) -> int:
    if err.code == "UNVERIFIED_TAIL":
        return EXIT["UNVERIFIED_TAIL"]
    if err.code in _IO:
        return EXIT["IO"]
    if err.code in _VALIDATION:
        return EXIT["VALIDATION"]
    return EXIT["SYNTHESIS"]


@dataclass(frozen=True)
class PipelineConfig:
    system: str | None = None      # None: the shipped reaction-diffusion system
    scenario: str | None = None    # None: the shipped nominal scenario
    out: str = "rsfdi_out"
    modes: int = 50                # simulation and filter window
    n_trunc: int = 200             # analysis window
    dt: float | None = None
    seed: int | None = None
    runs: int = 70
    jobs: int = 1
    allow_unverified: bool = False
    fault_index: int | None = None  # 1-based

    def fault_indices(self, p: int) -> list[int]:
        if self.fault_index is None:
            return list(range(p))
        if not 1 <= self.fault_index <= p:
            raise RSFDIError("INVALID", f"--fault-index must be in 1..{p}")
        return [self.fault_index - 1]


def shipped(name: str) -> str:
    return resources.files("rsfdi").joinpath("data", name).read_text()


def load_config_system(cfg: PipelineConfig) -> RieszSpectralSystem:
    return load_system(cfg.system if cfg.system else shipped("reaction_diffusion.json"))


def load_config_scenario(cfg: PipelineConfig) -> Scenario:
    sc = load_scenario(cfg.scenario if cfg.scenario else shipped("scenario_nominal.json"))
    if cfg.dt is not None:
        sc = replace(sc, dt=float(cfg.dt))
    if cfg.seed is not None:
        sc = sc.with_seed(cfg.seed)
    elif sc.seed is None:
        sc = sc.with_seed(0)
    return sc


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, plain floats, non-finite values as strings."""
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _plain(o):
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else repr(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    return o


# ---------------------------------------------------------------------------
# pipeline stages (library calls)


def _verdicts(sys: RieszSpectralSystem, U, i: int, acfg: AnalysisConfig) -> dict:
    out = {}
    rep = check_fdi_necessary(sys, i, acfg.n_trunc, result=U)
    out["necessary"] = rep.verdict
    if not rep.ok:
        return out
    try:
        Q = quotient_system(sys, U, acfg.tol)
    except RSFDIError as e:
        out["quotient"] = e.code
        return out
    ev = Q.eigenvalues()
    top = float(ev.real.max()) if ev.size else -math.inf
    out["quotient_dim"] = Q.dim
    out["quotient_max_re"] = max(top, Q.tail_sup_re())
    out["quotient_leading_eigenvalues"] = [[z.real, z.imag] for z in ev[:5]]
    for strat in STRATEGIES:
        try:
            if strat == "CASE2" and not Q.is_finite:
                out[strat] = "NOT_APPLICABLE"
                continue
            _, cert = observer_gain(Q, strat, acfg.margin_req)
            out[strat] = "OK"
            out[strat + "_margin"] = cert.margin
        except RSFDIError as e:
            out[strat] = e.code
    return out


def _summary_line(i: int, U, v: dict) -> str:
    parts = [f"fault {i + 1}: S* = {U.S_star.describe()}", f"necessary condition {'OK' if v['necessary'] == 'NECESSARY_OK' else 'FAIL'}"]
    if v.get("CASE1") == "OK":
        parts.append(f"Case 1 OK (all quotient eigenvalues <= {v['quotient_max_re']:.6g})")
    elif "CASE1" in v:
        parts.append(f"Case 1 {v['CASE1']}")
    if "LYAPUNOV" in v:
        parts.append(f"Lyapunov {v['LYAPUNOV']}")
    return "; ".join(parts)


def analysis_artifacts(cfg: PipelineConfig, sys: RieszSpectralSystem | None = None) -> tuple[dict, list]:
    """Files under analysis/ plus the faults whose S* tail is undecided."""
    sys = sys or load_config_system(cfg)
    acfg = AnalysisConfig(n_trunc=cfg.n_trunc, allow_unverified=cfg.allow_unverified)
    val = validate_regular_rs(sys, cfg.n_trunc)
    if not val.ok:
        raise RSFDIError("INVALID", "system fails regular Riesz-spectral validation", report=val.to_json())
    files = {"analysis/validation.json": dumps(val.to_json())}
    lines, undecided = [], []
    for i in cfg.fault_indices(sys.p):
        others = [l for j, l in enumerate(sys.faults) if j != i]
        U = min_unobservability_subspace(sys, others, cfg.n_trunc, tol=acfg.tol)
        v = _verdicts(sys, U, i, acfg)
        rec = {"fault": i + 1, "n_trunc": cfg.n_trunc, "verdicts": v, "tail_verified": U.tail_verified,
               "L_cap_S_dim": check_fdi_necessary(sys, i, cfg.n_trunc, result=U).intersection_dim,
               **U.to_json()}
        files[f"analysis/fault_{i + 1}.json"] = dumps(rec)
        lines.append(_summary_line(i, U, v))
        if not U.tail_verified:
            undecided.append(i + 1)
    files["analysis/summary.txt"] = "\n".join(lines) + "\n"
    return files, undecided


def synthesis_artifacts(cfg: PipelineConfig, sys: RieszSpectralSystem | None = None) -> tuple[dict, list]:
    sys = sys or load_config_system(cfg)
    filters = build_filters(sys, cfg.modes, cfg.fault_indices(sys.p),
                            AnalysisConfig(allow_unverified=True))
    files = {f"filters/filter_{f.index + 1}.json": dumps(f.to_json()) for f in filters}
    return files, filters


def threshold_artifacts(cfg: PipelineConfig, sys=None, filters=None) -> tuple[dict, object]:
    sys = sys or load_config_system(cfg)
    if filters is None:
        _, filters = synthesis_artifacts(cfg, sys)
    sc = load_config_scenario(cfg)
    base = cfg.seed if cfg.seed is not None else 0
    th = monte_carlo_thresholds(sys, filters, sc, cfg.runs, base, cfg.jobs)
    rec = {"filters": [f.index + 1 for f in filters], "scenario": sc.healthy().to_json(), **th.to_json()}
    return {"filters/thresholds.json": dumps(rec)}, th


def simulation_artifacts(cfg: PipelineConfig, sys=None, filters=None, thresholds=None,
                         scenario: Scenario | None = None, name: str = "trace") -> tuple[dict, object]:
    sys = sys or load_config_system(cfg)
    if filters is None:
        _, filters = synthesis_artifacts(cfg, sys)
    sc = scenario or load_config_scenario(cfg)
    res = simulate(sys, filters, sc)
    sim = SimConfig()
    files = {f"traces/{name}.csv": trace_csv(res, thresholds)}
    rec = {"scenario": sc.to_json(), "n_modes": res.n_modes,
           "max_abs_residual": [float(tr.magnitude.max()) for tr in res.traces]}
    if thresholds is not None:
        table = detect(res.traces, thresholds, sim.n_persist, onsets_of(sc))
        rec["decisions"] = table.to_json()
    files[f"traces/{name}.json"] = dumps(rec)
    return files, res


def reproduce_artifacts(cfg: PipelineConfig) -> dict:
    """validate, analyze both faults, synthesize, thresholds, nominal run, severity sweep."""
    sys = load_config_system(cfg)
    acfg = replace(cfg, allow_unverified=True, fault_index=None)
    files, undecided = analysis_artifacts(acfg, sys)
    fs, filters = synthesis_artifacts(acfg, sys)
    files.update(fs)
    tf, th = threshold_artifacts(acfg, sys, filters)
    files.update(tf)
    sc = load_config_scenario(acfg)
    sf, res = simulation_artifacts(acfg, sys, filters, th.values, sc, "nominal")
    files.update(sf)
    nominal = json.loads(sf["traces/nominal.json"])["decisions"]
    rows = []
    for r, (s1, s2) in enumerate(SEVERITY_ROWS, start=1):
        scr = replace(sc, faults=(FaultEvent(0, 5.0, s1), FaultEvent(1, 7.0, s2)))
        out, _ = simulation_artifacts(acfg, sys, filters, th.values, scr, f"severity_row{r}")
        dec = json.loads(out[f"traces/severity_row{r}.json"])["decisions"]
        files[f"traces/severity_row{r}.json"] = out[f"traces/severity_row{r}.json"]
        rows.append({"row": r, "f1": s1, "f2": s2,
                     "delay_f1": dec["rows"][0]["delay"], "delay_f2": dec["rows"][1]["delay"]})
    conv = convergence_report(sys, sc, cfg.modes)
    margins = {f"filter_{f.index + 1}": f.margin for f in filters}
    summary = {"system": sys.name, "n_trunc": cfg.n_trunc, "n_modes": cfg.modes, "dt": sc.dt,
               "seed": sc.seed, "runs": cfg.runs, "thresholds": list(th.values),
               "margins": margins, "undecided_tail_faults": undecided,
               "nominal_decisions": nominal, "severity_table": rows, "convergence": conv}
    files["summary.json"] = dumps(summary)
    return files


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsfdi", description="Fault detection filters for Riesz-spectral systems")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("analyze", "synthesize", "simulate", "thresholds", "reproduce-example"):
        p = sub.add_parser(name)
        p.add_argument("--system", default=None, help="system JSON (default: shipped reaction-diffusion)")
        p.add_argument("--scenario", default=None, help="scenario JSON (default: shipped nominal)")
        p.add_argument("--out", default="rsfdi_out")
        p.add_argument("--modes", type=int, default=50, help="modes per family for filters and simulation")
        p.add_argument("--n-trunc", type=int, default=200, help="modes per family for analysis")
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--runs", type=int, default=70)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--allow-unverified", action="store_true")
        p.add_argument("--fault-index", type=int, default=None, help="1-based fault number")
    return ap


def config_from_args(ns: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(ns.system, ns.scenario, ns.out, ns.modes, ns.n_trunc, ns.dt, ns.seed,
                          ns.runs, ns.jobs, ns.allow_unverified, ns.fault_index)


def _write(out: str, files: dict) -> None:
    root = Path(out)
    try:
        for rel, text in files.items():
            p = root / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
    except OSError as exc:
        raise RSFDIError("IO", f"cannot write output: {exc}") from exc


def _require(out: str, sub: str, stage: str) -> None:
    if not (Path(out) / sub).is_dir():
        raise RSFDIError("IO", f"{sub}/ not found under {out}; run `{stage}` first")


def run(command: str, cfg: PipelineConfig) -> dict:
    """Files a command produces; raises RSFDIError on failure."""
    if command == "analyze":
        files, undecided = analysis_artifacts(cfg)
        if undecided and not cfg.allow_unverified:
            _write(cfg.out, files)
            raise RSFDIError("UNVERIFIED_TAIL", "S* beyond the window is undecided; rerun with --allow-unverified",
                             faults=undecided)
        return files
    if command == "synthesize":
        _require(cfg.out, "analysis", "analyze")
        return synthesis_artifacts(cfg)[0]
    if command == "thresholds":
        _require(cfg.out, "filters", "synthesize")
        return threshold_artifacts(cfg)[0]
    if command == "simulate":
        _require(cfg.out, "filters", "synthesize")
        thp = Path(cfg.out) / "filters" / "thresholds.json"
        try:
            th = json.loads(thp.read_text())["values"] if thp.exists() else None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise RSFDIError("INVALID", f"malformed thresholds file: {exc}") from exc
        return simulation_artifacts(cfg, thresholds=th)[0]
    if command == "reproduce-example":
        return reproduce_artifacts(cfg)
    raise RSFDIError("INVALID", f"unknown command {command}")


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    cfg = config_from_args(ns)
    try:
        files = run(ns.command, cfg)
        _write(cfg.out, files)
    except RSFDIError as err:
        _sys.stderr.write(json.dumps({"error": err.to_dict(), "command": ns.command}) + "\n")
        return exit_code(err)
    if ns.command == "analyze":
        _sys.stdout.write(files["analysis/summary.txt"])
    else:
        _sys.stdout.write(f"wrote {len(files)} files under {cfg.out}\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
