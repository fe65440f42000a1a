import numpy as np
import pytest
from math import comb

from embdistill import oracle
from embdistill.lattice import NEG_INF, EmissionLattice
from embdistill.model import blank_removal

from conftest import make_random_lattice


class TestEnumeration:
    def test_t2_n1_two_paths(self):
        paths = oracle.enumerate_alignments(2, 1)
        assert sorted(paths) == [(0, 1, 0), (1, 0, 0)]

    def test_t1_n2_single_path(self):
        assert oracle.enumerate_alignments(1, 2) == [(1, 2, 0)]

    def test_count_formula(self):
        for T in range(1, 7):
            for N in range(0, 5):
                paths = oracle.enumerate_alignments(T, N)
                assert len(paths) == comb(T + N - 1, N), (T, N)

    def test_all_paths_valid(self):
        for T, N in [(3, 2), (4, 3), (2, 4)]:
            for z in oracle.enumerate_alignments(T, N):
                assert len(z) == T + N
                assert z[-1] == oracle.BLANK
                assert sum(1 for s in z if s == oracle.BLANK) == T
                # prefix counters never exceed the totals
                blanks = tokens = 0
                for s in z:
                    blanks += s == oracle.BLANK
                    tokens += s != oracle.BLANK
                    assert blanks <= T and tokens <= N
                # non-blank symbols appear in order 1..N
                assert [s for s in z if s != oracle.BLANK] == list(range(1, N + 1))

    def test_blank_removal_roundtrip(self):
        for z in oracle.enumerate_alignments(4, 3):
            assert blank_removal(z) == [1, 2, 3]

    def test_guard_rejects_huge_grids(self):
        with pytest.raises(ValueError, match="guard"):
            oracle.enumerate_alignments(60, 30)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            oracle.enumerate_alignments(0, 1)
        with pytest.raises(ValueError):
            oracle.enumerate_alignments(2, -1)


class TestExactLikelihood:
    def test_single_node(self):
        lp = np.log(np.array([[[0.25, 0.75]]]))
        lat = EmissionLattice(log_probs=lp, tokens=np.zeros(0, dtype=np.int64))
        assert oracle.exact_log_likelihood(lat) == pytest.approx(np.log(0.25))

    def test_all_blank_mass(self):
        lp = np.full((2, 2, 2), NEG_INF)
        lp[:, :, 0] = 0.0
        lat = EmissionLattice(log_probs=lp, tokens=np.array([1]))
        assert oracle.exact_log_likelihood(lat) == NEG_INF


class TestExactPosterior:
    def test_uniform_two_path(self):
        lat = EmissionLattice(
            log_probs=np.log(np.full((2, 2, 2), 0.5)), tokens=np.array([1])
        )
        q = oracle.exact_posterior(lat)
        np.testing.assert_allclose(q.raw, [[1.0, 0.5]], atol=1e-12)

    def test_single_frame(self, rng):
        lat = make_random_lattice(rng, 1, 2, 3)
        q = oracle.exact_posterior(lat)
        np.testing.assert_allclose(q.raw, np.ones((2, 1)), atol=1e-12)

    def test_zero_likelihood_rejected(self):
        lp = np.full((2, 2, 2), NEG_INF)
        lp[:, :, 0] = 0.0
        lat = EmissionLattice(log_probs=lp, tokens=np.array([1]))
        with pytest.raises(ValueError):
            oracle.exact_posterior(lat)


def test_exact_joint_loss_t1_equals_per_token_sum(rng):
    phi = rng.normal(size=(1, 3))
    psi = rng.normal(size=(2, 2))
    targets = rng.normal(size=(2, 4))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    q = np.ones((2, 1))
    got = oracle.exact_joint_loss(phi, psi, q, targets, w, b, "l2_sq")
    want = 0.0
    for i in range(2):
        r = w @ np.concatenate([phi[0], psi[i]]) + b
        want += np.sum((r - targets[i]) ** 2)
    assert got == pytest.approx(want, abs=1e-12)


def test_exact_joint_loss_zero_when_everything_zero():
    phi = np.zeros((2, 3))
    psi = np.zeros((3, 2))
    q = np.full((3, 2), 0.5)
    assert (
        oracle.exact_joint_loss(phi, psi, q, np.zeros((3, 4)), np.zeros((4, 5)), np.zeros(4), "l1_norm")
        == 0.0
    )
