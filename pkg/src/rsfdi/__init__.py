"""Geometric fault detection and isolation for regular Riesz-spectral systems."""

from .config import AnalysisConfig, SimConfig
from .errors import RSFDIError
from .fdi_synthesis import DetectionFilter, synthesize
from .geometric_invariants import (check_fdi_necessary, min_conditioned_invariant, min_unobservability_subspace,
                                   unobservable_subspace)
from .sim_engine import FaultEvent, Scenario, build_filters, detect, monte_carlo_thresholds, simulate
from .spectral_core import (EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector, TailTerm,
                            apply_A, inner_product, load_system, output_map, resolvent_apply,
                            validate_regular_rs)

__all__ = ["RSFDIError", "AnalysisConfig", "SimConfig",
           "EigenRule", "ModeFamily", "RieszSpectralSystem", "SpectralVector", "TailTerm",
           "apply_A", "inner_product", "load_system", "output_map", "resolvent_apply", "validate_regular_rs",
           "unobservable_subspace", "min_conditioned_invariant", "min_unobservability_subspace",
           "check_fdi_necessary", "DetectionFilter", "synthesize",
           "FaultEvent", "Scenario", "simulate", "build_filters", "monte_carlo_thresholds", "detect"]
__version__ = "0.1.0"
