"""Two-component reaction-diffusion example on [0, pi].

A = [[d2/dz2, 0.1], [0.1, d2/dz2]] with Dirichlet/Neumann data gives two real
families: phi_k^1 = sqrt(2/pi)[sin kz, sin kz] with lambda = 0.1 - k^2 and
phi_k^2 = sqrt(2/pi)[sin kz, -sin kz] with lambda = -0.1 - k^2.  Each
eigenfunction has squared norm 2, so the biorthogonal functional is phi_k / 2.
"""

from __future__ import annotations

import math

import numpy as np

from .spectral_core import EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector, TailTerm

N_OUTPUT_ENTRIES = 1024
_SQRT2_2 = math.sqrt(2.0) / 2.0
# cos(m*pi/4) for m mod 8, exact up to one rounding
_COS8 = (1.0, _SQRT2_2, 0.0, -_SQRT2_2, -1.0, -_SQRT2_2, 0.0, _SQRT2_2)
_AMP = 2.0 * math.sqrt(2.0 / math.pi)


def gamma1(k: int) -> float:
    """<c1, phi_k^1> = 2 sqrt(2/pi) (1 - cos(k pi/4)) / k."""
    return _AMP * (1.0 - _COS8[k % 8]) / k


def gamma2(k: int) -> float:
    """<c2, phi_k^2> = 2 sqrt(2/pi) (cos(3k pi/4) - cos(k pi)) / k."""
    return _AMP * (_COS8[(3 * k) % 8] - (1.0 if k % 2 == 0 else -1.0)) / k


def build_system(n_entries: int = N_OUTPUT_ENTRIES, tail_start: int = 5) -> RieszSpectralSystem:
    fam1 = ModeFamily("fam1", EigenRule.affine_ksq(0.1, -1.0), gram=2.0)
    fam2 = ModeFamily("fam2", EigenRule.affine_ksq(-0.1, -1.0), gram=2.0)
    ks = range(1, n_entries + 1)
    c1 = SpectralVector({("fam1", k): [gamma1(k) / 2.0] for k in ks if gamma1(k) != 0.0})
    c2 = SpectralVector({("fam2", k): [gamma2(k) / 2.0] for k in ks if gamma2(k) != 0.0})
    b1 = SpectralVector(tails=[TailTerm.make("fam1", 1.0, 1.0, tail_start)])
    b2 = SpectralVector(tails=[TailTerm.make("fam2", 1.0, 2.0, tail_start)])
    return RieszSpectralSystem(
        [fam1, fam2], B=[b1, b2], C=[c1, c2], faults=[b1, b2],
        orthogonality_facts=[(0, "fam2"), (1, "fam1")], name="reaction_diffusion")
