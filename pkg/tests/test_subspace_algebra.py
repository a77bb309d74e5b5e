import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import o_dist, o_intersect, o_orth
from rsfdi.spectral_core import EigenRule, ModeFamily, RieszSpectralSystem, SpectralVector
from rsfdi.subspace_algebra import (IndexSet, StructuredSubspace, complement, contains, dense_intersect, dense_sum,
                                    distance, intersect, kernel_of_output, largest_invariant_in, null, orth,
                                    orth_complement_within, projector_distance, quotient_map, span, subspace_sum)

small = st.frozensets(st.integers(1, 30), max_size=8)


def index_sets():
    return st.builds(lambda cof, m: IndexSet(cof, m), st.booleans(), small)


def members(s: IndexSet, n=40):
    return {k for k in range(1, n + 1) if k in s}


class TestIndexSet:
    @given(index_sets(), index_sets())
    def test_union_intersect_match_sets(self, a, b):
        assert members(a.union(b)) == members(a) | members(b)
        assert members(a.intersect(b)) == members(a) & members(b)
        assert members(a.minus(b)) == members(a) - members(b)

    @given(index_sets())
    def test_complement_involution(self, a):
        assert members(a.complement().complement()) == members(a)
        assert members(a.complement()) == set(range(1, 41)) - members(a)

    @given(index_sets(), index_sets())
    def test_subset(self, a, b):
        assert a.intersect(b).issubset(a)
        assert a.issubset(a.union(b))

    @given(index_sets())
    def test_json_round_trip(self, a):
        assert members(IndexSet.from_json(a.to_json())) == members(a)

    def test_ge_and_beyond(self):
        s = IndexSet.ge(5)
        assert 4 not in s and 5 in s and 10**6 in s
        assert members(IndexSet.finite([3, 50]).beyond(10)) == set()
        assert 11 in IndexSet.all().beyond(10)


class TestDenseHelpers:
    @given(st.integers(0, 2**31 - 1))
    def test_intersection_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 9))
        common = rng.standard_normal((n, int(rng.integers(0, 3))))
        Q1 = o_orth(np.hstack([common, rng.standard_normal((n, 1))]))
        Q2 = o_orth(np.hstack([common, rng.standard_normal((n, 1))]))
        ours = dense_intersect(Q1, Q2)
        ref = o_intersect(Q1, Q2)
        assert ours.shape[1] == ref.shape[1]
        assert o_dist(ours, ref) < 1e-8

    def test_null_uses_absolute_scale(self):
        M = np.array([[1e-14, 0.0]])
        assert null(M, scale=1.0).shape[1] == 2
        assert null(M).shape[1] == 1

    def test_orth_and_complement(self):
        Q, info = orth(np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]))
        assert Q.shape[1] == 1
        Cq = complement(Q)
        assert Cq.shape == (3, 2) and np.allclose(Q.T @ Cq, 0)

    def test_sum_and_distance(self):
        e = np.eye(3)
        S = dense_sum(e[:, :1], e[:, 1:2], e[:, :1])
        assert S.shape[1] == 2
        assert projector_distance(S, e[:, :2]) < 1e-14

    def test_largest_invariant_in(self):
        A = np.diag([1.0, 2.0, 3.0])
        A[0, 1] = 1.0
        Q = np.eye(3)[:, [0, 2]]
        V = largest_invariant_in(A, Q)
        # e1 and e3 are eigenvectors; span(e1, e3) is invariant
        assert V.shape[1] == 2
        Q2 = np.eye(3)[:, [1]]
        assert largest_invariant_in(A, Q2).shape[1] == 0


@pytest.fixture(scope="module")
def two_fam():
    f1 = ModeFamily("a", EigenRule.affine_ksq(0.0, -1.0))
    f2 = ModeFamily("b", EigenRule.affine_ksq(-0.5, -1.0))
    c = SpectralVector({("a", k): [1.0 / k] for k in range(1, 40)})
    return RieszSpectralSystem([f1, f2], C=[c], orthogonality_facts=[(0, "b")])


class TestStructured:
    def test_zero_whole(self, two_fam):
        w = two_fam.window(10)
        assert StructuredSubspace.zero(w).dim_window == 0
        assert StructuredSubspace.whole(w).dim_window == w.n

    def test_families_and_beyond(self, two_fam):
        w = two_fam.window(10)
        S = StructuredSubspace.families(w, {"b": IndexSet.all()})
        assert S.dim_window == 10
        assert "b" in S.beyond()

    def test_canonical_extracts_blocks(self, two_fam):
        w = two_fam.window(5)
        Z = np.zeros((w.n, 1))
        s, _ = w.index[("a", 2)]
        Z[s, 0] = 3.0
        S = StructuredSubspace.from_dense(w, Z).canonical()
        assert S.basis.shape[1] == 0 and 2 in S.selections["a"]

    def test_sum_intersect_contains(self, two_fam):
        w = two_fam.window(6)
        A = StructuredSubspace.families(w, {"a": IndexSet.finite([1, 2])})
        B = StructuredSubspace.families(w, {"a": IndexSet.finite([2, 3])})
        assert subspace_sum(A, B).dim_window == 3
        assert intersect(A, B).dim_window == 1
        assert contains(subspace_sum(A, B), A)
        assert not contains(A, B)
        assert distance(A, A) == 0.0

    def test_span_and_complement(self, two_fam):
        w = two_fam.window(4)
        v = SpectralVector({("a", 1): [1.0], ("b", 2): [1.0]})
        S = span(w, [v])
        assert S.dim_window == 1
        Sc = orth_complement_within(S)
        assert Sc.dim_window == w.n - 1
        assert intersect(S, Sc).dim_window == 0

    def test_contains_vector_with_tail(self, two_fam):
        from rsfdi.spectral_core import TailTerm
        w = two_fam.window(4)
        v = SpectralVector(tails=[TailTerm.make("b", 1.0, 2.0, 1)])
        assert StructuredSubspace.families(w, {"b": IndexSet.all()}).contains_vector(v)
        assert not StructuredSubspace.families(w, {"b": IndexSet.finite([1, 2, 3, 4])}).contains_vector(v)


class TestKernelAndQuotient:
    def test_kernel_contains_orthogonal_family(self, two_fam):
        K = kernel_of_output(two_fam, n_trunc=10)
        assert "b" in K.families_inside()
        assert K.contains(SpectralVector.unit("b", 7))
        assert not K.contains(SpectralVector.unit("a", 1))

    @given(st.integers(0, 2**31 - 1))
    def test_quotient_kills_kernel(self, seed):
        rng = np.random.default_rng(seed)
        f = ModeFamily("a", EigenRule.affine_ksq(0.0, -1.0), count=8)
        w = RieszSpectralSystem([f]).window(8)
        Z = np.zeros((w.n, 2))
        Z[:4] = rng.standard_normal((4, 2))
        S = StructuredSubspace.from_dense(w, Z, {"a": IndexSet.finite([7])})
        Q = quotient_map(w, S)
        assert Q.dim == w.n - S.dim_window
        assert np.allclose(Q.P @ S.dense_basis(), 0, atol=1e-12)
        assert np.allclose(Q.P @ Q.R, np.eye(Q.dim), atol=1e-12)

    def test_untouched_blocks_are_labelled(self, two_fam):
        w = two_fam.window(5)
        S = StructuredSubspace.families(w, {"b": IndexSet.all()})
        Q = quotient_map(two_fam, S)
        assert Q.coordinate_labels() == [("a", k) for k in range(1, 6)]
