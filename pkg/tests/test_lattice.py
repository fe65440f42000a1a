import numpy as np
import pytest

from embdistill import oracle
from embdistill.lattice import (
    NEG_INF,
    AlignmentPosterior,
    EmissionLattice,
    NonFiniteLossError,
    alignment_posterior,
    compute_backward,
    compute_forward,
    forward_backward,
    lattice_dump,
    log_likelihood,
    node_occupancy,
    transducer_loss_and_logit_grads,
)

from conftest import assert_grad_close, fd_gradient, make_random_lattice, make_uniform_lattice


def uniform_half_lattice(T, N):
    """Every node 0.5/0.5 over {blank, token} (K=2)."""
    return EmissionLattice(
        log_probs=np.log(np.full((T, N + 1, 2), 0.5)), tokens=np.ones(N, dtype=np.int64)
    )


class TestForward:
    def test_single_node_lattice(self):
        b = 0.7
        lp = np.log(np.array([[[b, 1 - b]]]))
        lat = EmissionLattice(log_probs=lp, tokens=np.zeros(0, dtype=np.int64))
        alpha = compute_forward(lat)
        assert alpha[0, 0] == 0.0
        assert log_likelihood(alpha, lat) == pytest.approx(np.log(b))

    def test_single_path_t1_n2(self, rng):
        lat = make_random_lattice(rng, 1, 2, 4)
        alpha = compute_forward(lat)
        expected = lat.log_probs[0, 0, lat.tokens[0]] + lat.log_probs[0, 1, lat.tokens[1]]
        assert alpha[0, 2] == pytest.approx(expected, abs=1e-12)

    def test_two_path_uniform(self):
        lat = uniform_half_lattice(2, 1)
        ab = forward_backward(lat)
        assert ab.log_Z == pytest.approx(np.log(0.25), abs=1e-12)

    def test_rejects_wrong_token_length(self):
        lp = np.log(np.full((2, 2, 2), 0.5))
        with pytest.raises(ValueError, match="length"):
            EmissionLattice(log_probs=lp, tokens=np.array([1, 1]))

    def test_rejects_unnormalized(self):
        lp = np.zeros((2, 2, 2))
        with pytest.raises(ValueError, match="not normalized"):
            EmissionLattice(log_probs=lp, tokens=np.array([1]))

    def test_rejects_nan(self):
        lp = np.log(np.full((1, 1, 2), 0.5))
        lp[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            EmissionLattice(log_probs=lp, tokens=np.zeros(0, dtype=np.int64))

    def test_rejects_empty_time_axis(self):
        with pytest.raises(ValueError, match="T must be >= 1"):
            EmissionLattice(
                log_probs=np.zeros((0, 1, 2)), tokens=np.zeros(0, dtype=np.int64)
            )


class TestBackward:
    def test_single_node(self):
        lp = np.log(np.array([[[0.4, 0.6]]]))
        lat = EmissionLattice(log_probs=lp, tokens=np.zeros(0, dtype=np.int64))
        beta = compute_backward(lat)
        assert beta[0, 0] == pytest.approx(np.log(0.4))

    def test_start_node_carries_total_likelihood(self, rng):
        for _ in range(10):
            lat = make_random_lattice(rng, 4, 2, 3)
            alpha = compute_forward(lat)
            beta = compute_backward(lat)
            assert alpha[0, 0] + beta[0, 0] == pytest.approx(
                log_likelihood(alpha, lat), abs=1e-9
            )

    def test_uniform_final_node(self):
        lat = uniform_half_lattice(2, 1)
        beta = compute_backward(lat)
        assert beta[1, 1] == pytest.approx(np.log(0.5), abs=1e-12)


class TestLikelihood:
    def test_all_blank_mass_gives_neg_inf(self):
        lp = np.full((3, 2, 2), NEG_INF)
        lp[:, :, 0] = 0.0  # all mass on blank
        lat = EmissionLattice(log_probs=lp, tokens=np.array([1]))
        alpha = compute_forward(lat)
        assert log_likelihood(alpha, lat) == NEG_INF

    def test_uniform_t3_n2_path_count(self):
        lat = make_uniform_lattice(3, 2, 2)
        ab = forward_backward(lat)
        assert np.exp(ab.log_Z) == pytest.approx(6 * 0.5**5, abs=1e-12)

    def test_matches_oracle_on_random_instances(self, rng):
        for _ in range(30):
            T = int(rng.integers(1, 6))
            N = int(rng.integers(0, 4))
            K = int(rng.integers(2, 5))
            lat = make_random_lattice(rng, T, N, K)
            ab = forward_backward(lat)
            assert ab.log_Z == pytest.approx(oracle.exact_log_likelihood(lat), abs=1e-9)


class TestOccupancy:
    def test_uniform_two_path_values(self):
        lat = uniform_half_lattice(2, 1)
        ab = forward_backward(lat)
        gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat)
        np.testing.assert_allclose(gamma, [[1.0, 0.5], [0.5, 1.0]], atol=1e-12)

    def test_endpoints_always_occupied(self, rng):
        for _ in range(10):
            lat = make_random_lattice(rng, 5, 3, 4)
            ab = forward_backward(lat)
            gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat)
            assert gamma[0, 0] == pytest.approx(1.0, abs=1e-9)
            assert gamma[-1, -1] == pytest.approx(1.0, abs=1e-9)
            assert np.all(gamma <= 1 + 1e-9)

    def test_single_frame_column_fully_occupied(self, rng):
        lat = make_random_lattice(rng, 1, 3, 4)
        ab = forward_backward(lat)
        gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat)
        np.testing.assert_allclose(gamma, np.ones((1, 4)), atol=1e-9)

    def test_antidiagonal_sums_reach_one(self, rng):
        for _ in range(10):
            T = int(rng.integers(1, 6))
            N = int(rng.integers(0, 4))
            lat = make_random_lattice(rng, T, N, 3)
            ab = forward_backward(lat)
            gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat)
            for c in range(T + N):
                s = sum(gamma[t, c - t] for t in range(max(0, c - N), min(T - 1, c) + 1))
                assert s == pytest.approx(1.0, abs=1e-9)

    def test_rejects_neg_inf_likelihood(self):
        lp = np.full((2, 2, 2), NEG_INF)
        lp[:, :, 0] = 0.0
        lat = EmissionLattice(log_probs=lp, tokens=np.array([1]))
        alpha = compute_forward(lat)
        beta = compute_backward(lat)
        with pytest.raises(NonFiniteLossError):
            node_occupancy(alpha, beta, NEG_INF, lat)


class TestAlignmentPosterior:
    def test_uniform_two_path(self):
        lat = uniform_half_lattice(2, 1)
        ab = forward_backward(lat)
        q = alignment_posterior(node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat))
        np.testing.assert_allclose(q.raw, [[1.0, 0.5]], atol=1e-12)
        np.testing.assert_allclose(q.normalized, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_single_frame_rows_are_one(self, rng):
        lat = make_random_lattice(rng, 1, 3, 4)
        ab = forward_backward(lat)
        q = alignment_posterior(node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat))
        np.testing.assert_allclose(q.normalized, np.ones((3, 1)), atol=1e-12)

    def test_rows_sum_to_one_and_raw_at_least_one(self, rng):
        for _ in range(20):
            T = int(rng.integers(1, 6))
            N = int(rng.integers(1, 4))
            lat = make_random_lattice(rng, T, N, 4)
            ab = forward_backward(lat)
            q = alignment_posterior(node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat))
            np.testing.assert_allclose(q.normalized.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(q.raw.sum(axis=1) >= 1 - 1e-9)
            assert np.all(q.raw > 0)

    def test_empty_for_n_zero(self, rng):
        lat = make_random_lattice(rng, 3, 0, 2)
        ab = forward_backward(lat)
        q = alignment_posterior(node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat))
        assert q.raw.shape == (0, 3)

    def test_rejects_all_zero_row(self):
        with pytest.raises(ValueError):
            AlignmentPosterior(raw=np.zeros((2, 3)))


class TestLossGradient:
    def test_single_node_reduces_to_cross_entropy(self):
        logits = np.array([[[0.3, -0.4]]])
        log_probs = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
        lat = EmissionLattice(log_probs=log_probs, tokens=np.zeros(0, dtype=np.int64))
        loss, grad = transducer_loss_and_logit_grads(lat)
        softmax = np.exp(log_probs[0, 0])
        assert loss == pytest.approx(-log_probs[0, 0, 0])
        np.testing.assert_allclose(grad[0, 0], softmax - np.array([1.0, 0.0]), atol=1e-12)

    def test_matches_finite_differences(self, rng):
        for _ in range(5):
            T, N, K = 4, 3, 5
            logits = rng.normal(size=(T, N + 1, K))
            tokens = rng.integers(1, K, size=N)

            def loss_of_logits():
                lp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
                lat = EmissionLattice(log_probs=lp, tokens=tokens)
                return transducer_loss_and_logit_grads(lat)[0]

            lp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
            lat = EmissionLattice(log_probs=lp, tokens=tokens)
            _, grad = transducer_loss_and_logit_grads(lat)
            assert_grad_close(grad, fd_gradient(loss_of_logits, logits))

    def test_unreachable_symbols_carry_softmax_mass_only(self):
        lat = make_uniform_lattice(3, 2, 4)
        _, grad = transducer_loss_and_logit_grads(lat)
        ab = forward_backward(lat)
        gamma = node_occupancy(ab.alpha, ab.beta, ab.log_Z, lat)
        # symbols 2 and 3 never match a target token (tokens are all 1)
        for k in (2, 3):
            np.testing.assert_allclose(grad[:, :, k], gamma * 0.25, atol=1e-12)

    def test_raises_on_impossible_target(self):
        lp = np.full((2, 2, 2), NEG_INF)
        lp[:, :, 0] = 0.0
        lat = EmissionLattice(log_probs=lp, tokens=np.array([1]))
        with pytest.raises(NonFiniteLossError):
            transducer_loss_and_logit_grads(lat)


def test_lattice_dump_schema_roundtrip(rng):
    import json

    lat = make_random_lattice(rng, 4, 2, 3)
    dump = lattice_dump(lat)
    again = json.loads(json.dumps(dump))
    assert again["T"] == 4 and again["N"] == 2 and again["K"] == 3
    ab = forward_backward(lat)
    np.testing.assert_allclose(np.array(again["alpha"]), ab.alpha, atol=0)
    np.testing.assert_allclose(np.array(again["beta"]), ab.beta, atol=0)
    q_norm = np.array(again["q_normalized"])
    np.testing.assert_allclose(q_norm.sum(axis=1), 1.0, atol=1e-12)
