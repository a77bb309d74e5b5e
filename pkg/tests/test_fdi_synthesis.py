import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from oracles import random_modal_system
from rsfdi import RSFDIError
from rsfdi.config import AnalysisConfig
from rsfdi.fdi_synthesis import (build_detection_filter, lyapunov_certificate, observer_gain, quotient_system,
                                 synthesize, verify_error_dynamics)
from rsfdi.geometric_invariants import min_unobservability_subspace
from rsfdi.spectral_core import EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector, TailTerm

LOOSE = AnalysisConfig(n_trunc=50, allow_unverified=True)


def dense_CL(sys, w):
    C = np.vstack([w.coords(c) for c in sys.C])
    L = np.column_stack([w.coords(l) for l in sys.faults])
    return C, L


def invariance_defect(sys, f):
    """|| P A + E C - F P || on the window, the term that must vanish for e' = F e + P L f."""
    w = f.P.window
    C, _ = dense_CL(sys, w)
    P = f.P.P
    return float(np.linalg.norm(P @ w.A + f.E @ C - f.F @ P)) / max(1.0, float(np.linalg.norm(w.A, 2)))


def scalar(lam=1.0, c=1.0):
    fam = ModeFamily("a", EigenRule.poly([lam]), count=1)
    return RieszSpectralSystem([fam], B=[SpectralVector.unit("a", 1)], C=[SpectralVector({("a", 1): [c]})],
                               faults=[SpectralVector.unit("a", 1)])


class TestObserverGain:
    def test_unstable_scalar_placed(self):
        f, _ = synthesize(scalar(1.0), 0, AnalysisConfig(n_trunc=1), targets=[-2.0])
        assert np.allclose(np.linalg.eigvals(f.F), [-2.0])
        assert np.linalg.matrix_rank(f.D_o) == 1
        assert f.margin == pytest.approx(2.0)

    def test_default_targets_reflect(self):
        f, _ = synthesize(scalar(1.0), 0, AnalysisConfig(n_trunc=1, margin_req=0.5))
        ev = np.linalg.eigvals(f.F)
        assert ev.real.max() <= -0.75 + 1e-12

    def test_zero_output_is_unobservable(self):
        sys = scalar(1.0)
        U = min_unobservability_subspace(sys, [], 1)
        Q = quotient_system(sys, U)
        Q0 = dataclasses.replace(Q, M=np.zeros_like(Q.M))
        with pytest.raises(RSFDIError) as e:
            observer_gain(Q0)
        assert e.value.code == "UNOBSERVABLE_UNSTABLE_PART"

    def test_stable_quotient_needs_no_gain(self, rd_filters):
        # fam1 quotient modes sit at 0.1 - k^2, fam2 at -0.1 - k^2
        for f, m in zip(rd_filters, (0.9, 1.1)):
            assert not np.any(f.D_o)
            assert f.margin == pytest.approx(m)

    def test_unknown_strategy(self):
        sys = scalar(-1.0)
        Q = quotient_system(sys, min_unobservability_subspace(sys, [], 1))
        with pytest.raises(RSFDIError) as e:
            observer_gain(Q, "CASE9")
        assert e.value.code == "INVALID"

    def test_case2_places_everything(self):
        sys = scalar(0.4)
        f, _ = synthesize(sys, 0, AnalysisConfig(n_trunc=1), strategy="CASE2")
        assert np.linalg.eigvals(f.F).real.max() < -0.05

    def test_slow_tail_has_no_margin(self):
        fam = ModeFamily("a", EigenRule.affine_ksq(0.0, -1e-3))
        c = SpectralVector(tails=[TailTerm.make("a", 1.0, 1.0, 1)])
        sys = RieszSpectralSystem([fam], C=[c], faults=[SpectralVector.unit("a", 1)])
        with pytest.raises(RSFDIError) as e:
            synthesize(sys, 0, AnalysisConfig(n_trunc=2, allow_unverified=True))
        assert e.value.code == "NO_MARGIN"


class TestLyapunov:
    def test_identity(self):
        c = lyapunov_certificate(-np.eye(3))
        assert np.allclose(c.lyapunov_block, 0.5 * np.eye(3))
        assert c.margin == pytest.approx(1.0)

    @given(st.integers(0, 2**31 - 1))
    def test_matches_gramian_integral(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        X = rng.standard_normal((n, n))
        F = X - (np.max(np.linalg.eigvals(X).real) + rng.uniform(0.5, 2.0)) * np.eye(n)
        ref, _ = quad_vec(lambda t: expm(F.T * t) @ expm(F * t), 0, np.inf, epsabs=1e-12, epsrel=1e-10)
        c = lyapunov_certificate(F)
        assert np.allclose(c.lyapunov_block, ref, rtol=1e-7, atol=1e-9)

    def test_unstable_rejected(self):
        with pytest.raises(RSFDIError) as e:
            lyapunov_certificate(np.array([[0.5]]))
        assert e.value.code == "UNSTABLE"

    def test_lyapunov_strategy_on_rd(self, rd):
        f, _ = synthesize(rd, 0, LOOSE, strategy="LYAPUNOV")
        assert f.certificate.kind == "LYAPUNOV"
        assert 0 < f.margin <= 0.9 + 1e-9
        assert verify_error_dynamics(f).kind == "LYAPUNOV"


class TestFilterInvariants:
    @pytest.mark.parametrize("i", [0, 1])
    def test_output_equation(self, rd, rd_filters, i):
        f = rd_filters[i]
        C, _ = dense_CL(rd, f.P.window)
        assert np.allclose(f.M @ f.P.P, f.H @ C, atol=1e-12)

    @pytest.mark.parametrize("i", [0, 1])
    def test_error_dynamics_identity(self, rd, rd_filters, i):
        assert invariance_defect(rd, rd_filters[i]) < 1e-10

    @pytest.mark.parametrize("i", [0, 1])
    def test_decoupling(self, rd, rd_filters, i):
        f = rd_filters[i]
        _, L = dense_CL(rd, f.P.window)
        assert np.linalg.norm(f.P.P @ L[:, 1 - i]) < 1e-12
        assert np.linalg.norm(f.P.P @ L[:, i]) > 1e-6

    def test_rd_quotient_spectrum(self, rd_filters):
        ev = np.sort(rd_filters[0].quotient.eigenvalues().real)[::-1]
        ks = [k for k in range(1, 51) if k % 8]
        assert np.allclose(ev, [0.1 - k * k for k in ks], rtol=0, atol=1e-9)
        assert rd_filters[0].E.shape == (44, 2) and not np.any(rd_filters[0].E)

    @given(st.integers(0, 2**31 - 1))
    def test_random_systems(self, seed):
        sys = random_modal_system(np.random.default_rng(seed))
        try:
            f, _ = synthesize(sys, 0, AnalysisConfig(n_trunc=1))
        except RSFDIError as e:
            assert e.code in {"DECOUPLING_FAIL", "UNOBSERVABLE_UNSTABLE_PART", "SYNTHESIS"}
            return
        C, L = dense_CL(sys, f.P.window)
        assert np.allclose(f.M @ f.P.P, f.H @ C, atol=1e-9)
        assert invariance_defect(sys, f) < 1e-8
        assert np.linalg.norm(f.P.P @ L[:, 1]) < 1e-8
        assert np.linalg.eigvals(f.F).real.max(initial=-1.0) < 0

    def test_trivial_s_star(self):
        fam = ModeFamily("a", EigenRule.poly([-1.0, -1.0]), count=3)
        rng = np.random.default_rng(1)
        C = [SpectralVector({("a", k): [rng.standard_normal()] for k in (1, 2, 3)}) for _ in range(2)]
        sys = RieszSpectralSystem([fam], C=C, faults=[SpectralVector.unit("a", 2)])
        f, U = synthesize(sys, 0, AnalysisConfig(n_trunc=3))
        w = f.P.window
        assert U.S_star.dim_window == 0
        assert np.allclose(f.H, np.eye(2)) and not np.any(f.D)
        R = f.P.R
        assert np.allclose(R @ f.A_p @ R.T, w.A)
        assert np.allclose(f.M @ R.T, np.vstack([w.coords(c) for c in C]))

    def test_duplicate_faults_fail(self, rd):
        sys = RieszSpectralSystem(rd.families, rd.B, rd.C, [rd.faults[0], rd.faults[0]], rd.orthogonality_facts)
        with pytest.raises(RSFDIError) as e:
            synthesize(sys, 0, LOOSE)
        assert e.value.code == "DECOUPLING_FAIL"

    def test_leak_detected_when_built_against_wrong_s_star(self, rd):
        U = min_unobservability_subspace(rd, [rd.faults[1]], 20)
        with pytest.raises(RSFDIError) as e:
            build_detection_filter(rd, U, 1)
        assert e.value.code == "DECOUPLING_FAIL"

    def test_unverified_tail_blocks_by_default(self, rd):
        with pytest.raises(RSFDIError) as e:
            synthesize(rd, 0, AnalysisConfig(n_trunc=30))
        assert e.value.code == "UNVERIFIED_TAIL"

    def test_index_out_of_range(self, rd):
        with pytest.raises(RSFDIError) as e:
            synthesize(rd, 2, LOOSE)
        assert e.value.code == "INVALID"

    def test_json_serializable(self, rd_filters):
        d = json.loads(json.dumps(rd_filters[0].to_json()))
        assert d["dim"] == 44 and d["certificate"]["kind"] == "EIGENVALUE_MARGIN"
