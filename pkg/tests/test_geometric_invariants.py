import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import compare_with_oracle, dense, o_dist, random_modal_system, unobservable
from rsfdi import RSFDIError
from rsfdi.geometric_invariants import (a_unobservable_subspace, check_fdi_necessary, friend_certificates,
                                        is_controlled_invariant_dual, is_T_conditioned_invariant,
                                        min_conditioned_invariant, min_unobservability_subspace,
                                        unobservable_subspace)
from rsfdi.spectral_core import EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector
from rsfdi.subspace_algebra import IndexSet, StructuredSubspace

EIGHTS = set(range(8, 201, 8))


def window_members(sel: IndexSet, n=200):
    return {k for k in range(1, n + 1) if k in sel}


class TestReactionDiffusion:
    @pytest.mark.parametrize("i", [0, 1])
    def test_s_star_structure(self, rd_analysis, i):
        U = rd_analysis[i]
        other, own = ("fam2", "fam1") if i == 0 else ("fam1", "fam2")
        sel = U.S_star.selections
        assert sel[other].cofinite and not sel[other].members
        # modes k = 8m of the faulty family are unobservable for both sensors
        assert window_members(sel[own]) == EIGHTS
        assert not U.tail_verified

    @pytest.mark.parametrize("i", [0, 1])
    def test_mixing_and_friend(self, rd_analysis, i):
        U = rd_analysis[i]
        expect = np.eye(2)[[i]]
        assert np.allclose(np.abs(U.H), expect)
        assert U.zero_friend_admissible
        assert U.D.certified

    @pytest.mark.parametrize("i", [0, 1])
    def test_fault_direction_outside(self, rd, rd_analysis, i):
        assert not rd_analysis[i].S_star.contains_vector(rd.faults[i])
        assert rd_analysis[i].S_star.contains_vector(rd.faults[1 - i])

    @pytest.mark.parametrize("i", [0, 1])
    def test_necessary_condition(self, rd, rd_analysis, i):
        r = check_fdi_necessary(rd, i, 200, rd_analysis[i])
        assert r.verdict == "NECESSARY_OK" and r.intersection_dim == 0

    def test_unobservable_is_eights(self, rd):
        N = unobservable_subspace(rd, 200)
        for fam in ("fam1", "fam2"):
            assert window_members(N.selections[fam]) == EIGHTS

    def test_duplicate_faults_fail(self, rd):
        sys = RieszSpectralSystem(rd.families, rd.B, rd.C, [rd.faults[0], rd.faults[0]],
                                  rd.orthogonality_facts)
        r = check_fdi_necessary(sys, 0, 40)
        assert r.verdict == "NECESSARY_FAIL"

    def test_strict_raises_on_unverified_tail(self, rd):
        with pytest.raises(RSFDIError) as e:
            min_unobservability_subspace(rd, [rd.faults[1]], 40, strict=True)
        assert e.value.code == "UNVERIFIED_TAIL"

    def test_bad_fault_index(self, rd):
        with pytest.raises(RSFDIError) as e:
            check_fdi_necessary(rd, 5, 20)
        assert e.value.code == "INVALID"


class TestRandomAgainstOracle:
    @settings(max_examples=40)
    @given(st.integers(0, 2**31 - 1))
    def test_subspaces_match(self, seed):
        sys = random_modal_system(np.random.default_rng(seed))
        dW, dS, _, cond, U = compare_with_oracle(sys)
        assert dW <= 1e-8 and dS <= 1e-8
        assert cond.iterations <= cond.bound
        assert U.D.certified

    @given(st.integers(0, 2**31 - 1))
    def test_friend_certificates_hold(self, seed):
        sys = random_modal_system(np.random.default_rng(seed))
        U = min_unobservability_subspace(sys, [sys.faults[1]], 1)
        A, C, _ = dense(sys)
        Q = U.S_star.dense_basis()
        if Q.shape[1]:
            Y = (A + U.D.D @ C) @ Q
            assert np.linalg.norm(Y - Q @ (Q.T @ Y)) <= 1e-7 * max(1.0, np.linalg.norm(A))
            assert np.max(np.abs(U.H @ C @ Q), initial=0.0) <= 1e-8

    @given(st.integers(0, 2**31 - 1))
    def test_unobservable_matches_kalman(self, seed):
        sys = random_modal_system(np.random.default_rng(seed))
        A, C, _ = dense(sys)
        N = unobservable_subspace(sys, 1)
        assert o_dist(N.dense_basis(), unobservable(A, C)) <= 1e-8

    @given(st.integers(0, 2**31 - 1))
    def test_stacking_agrees(self, seed):
        sys = random_modal_system(np.random.default_rng(seed), with_repeats=False)
        try:
            res = a_unobservable_subspace(sys, 40, 1)
        except RSFDIError as e:
            assert e.code == "NO_CONVERGENCE"
            return
        assert res.converged and res.agreement <= 1e-6


class TestVerdicts:
    def fam(self):
        return RieszSpectralSystem([ModeFamily("a", EigenRule.poly([-1.0, -1.0]), count=3)],
                                   C=[SpectralVector({("a", 1): [1.0]})])

    def test_whole_space_is_conditioned_invariant(self):
        sys = self.fam()
        w = sys.window(3)
        assert is_T_conditioned_invariant(sys, StructuredSubspace.whole(w)).ok

    def test_non_invariant_subspace_rejected(self):
        sys = RieszSpectralSystem([ModeFamily("a", EigenRule.poly([0.0]), jordan=((1, 2),), count=1)],
                                  C=[SpectralVector({("a", 1): [1.0, 0.0]})])
        w = sys.window(1)
        assert np.allclose(w.A, [[0.0, 1.0], [0.0, 0.0]])
        # ker C = span(e2) and A e2 = e1 leaves it
        v = is_T_conditioned_invariant(sys, StructuredSubspace.from_dense(w, np.array([[0.0], [1.0]])))
        assert not v.ok and v.residual > 0.1
        assert is_T_conditioned_invariant(sys, StructuredSubspace.from_dense(w, np.array([[1.0], [0.0]]))).ok

    def test_controlled_dual_whole(self):
        sys = self.fam()
        w = sys.window(3)
        assert is_controlled_invariant_dual(sys, StructuredSubspace.whole(w)).ok

    def test_friend_certificates_zero_D(self, rd_analysis, rd):
        U = rd_analysis[0]
        D = np.zeros_like(U.D.D)
        inv, phi = friend_certificates(rd, D, U.W_star, U.W_phi)
        assert phi == 0.0

    def test_conditioned_iterations_bounded(self, rd):
        c = min_conditioned_invariant(rd, [rd.faults[1]], 60)
        assert c.iterations <= c.bound
