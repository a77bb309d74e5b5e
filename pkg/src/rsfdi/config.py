"""Dataclass configs holding tolerances and run-time defaults."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Tolerances:
    ip: float = 1e-9        # inner-product zero test
    orth: float = 1e-10     # orthonormality of stored bases
    eig: float = 1e-9       # eigenvalue coincidence
    rank: float = 1e-9      # relative singular-value cutoff
    stationary: float = 1e-9  # projector distance for Z_k stationarity
    cosine: float = 1e-9    # principal-angle cutoff is 1 - cosine


DEFAULT_TOL = Tolerances()


@dataclass(frozen=True)
class AnalysisConfig:
    n_trunc: int = 200
    n_max_stack: int = 80
    margin_req: float = 0.05
    allow_unverified: bool = False
    tol: Tolerances = field(default_factory=Tolerances)


@dataclass(frozen=True)
class SimConfig:
    n_modes: int = 50
    dt: float = 1e-3
    n_persist: int = 3
    # "sqrt_dt": samples are sqrt(var*dt)*N(0,1); "unit": samples are sqrt(var)*N(0,1)
    noise_scaling: str = "sqrt_dt"
    chunk: int = 10
