import dataclasses

import numpy as np
import pytest

from embdistill import oracle
from embdistill.distill import (
    DistanceKind,
    RegressionNet,
    attention_embedding_loss,
    distance,
    joint_regression_loss,
    l2_joint_token_sync_gap,
    multitask_combine,
    token_sync_loss,
)
from embdistill.lattice import AlignmentPosterior

from conftest import assert_grad_close, fd_gradient


def random_posterior(rng, n_tokens, n_frames):
    """Occupancy-like rows: strictly positive, summing to >= 1."""
    raw = rng.uniform(0.05, 1.0, size=(n_tokens, n_frames))
    raw *= (1.0 + rng.uniform(0.0, 0.8, size=(n_tokens, 1))) / raw.sum(axis=1, keepdims=True)
    return AlignmentPosterior(raw=raw)


def random_pair_net(rng, f_dim, p_dim, out_dim):
    return RegressionNet(
        weights=rng.normal(size=(out_dim, f_dim + p_dim)),
        bias=rng.normal(size=out_dim),
        pair_split=f_dim,
    )


class TestDistance:
    def test_zero_at_equal_inputs(self, rng):
        v = rng.normal(size=6)
        for kind in DistanceKind:
            value, grad = distance(kind, v, v.copy())
            assert value == 0.0
            np.testing.assert_array_equal(grad, np.zeros(6))

    def test_l1_normalized_example(self):
        value, grad = distance(DistanceKind.L1_NORMALIZED, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert value == pytest.approx(1.0)
        np.testing.assert_allclose(grad, [0.5, -0.5])

    def test_l2_squared_example(self):
        value, _ = distance(DistanceKind.L2_SQUARED, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert value == pytest.approx(2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            distance(DistanceKind.L2_SQUARED, np.zeros(3), np.zeros(4))

    def test_gradient_matches_fd(self, rng):
        for kind in DistanceKind:
            u = rng.normal(size=8)
            v = rng.normal(size=8)
            _, grad = distance(kind, u, v)
            fd = fd_gradient(lambda: distance(kind, u, v)[0], u)
            assert_grad_close(grad, fd)


class TestAttentionEmbeddingLoss:
    def test_zero_net_zero_targets(self, rng):
        states = rng.normal(size=(3, 5))
        reg = RegressionNet(weights=np.zeros((4, 5)), bias=np.zeros(4))
        res = attention_embedding_loss(states, np.zeros((3, 4)), reg, DistanceKind.L1_NORMALIZED)
        assert res.value == 0.0

    def test_scalar_identity_case(self):
        reg = RegressionNet(weights=np.array([[1.0]]), bias=np.zeros(1))
        res = attention_embedding_loss(
            np.array([[2.0]]), np.array([[3.0]]), reg, DistanceKind.L2_SQUARED
        )
        assert res.value == pytest.approx(1.0)
        np.testing.assert_allclose(res.grad_phi, [[-2.0]])

    def test_gradients_match_fd(self, rng):
        for kind in DistanceKind:
            states = rng.normal(size=(3, 5))
            targets = rng.normal(size=(3, 4))
            w = rng.normal(size=(4, 5))
            b = rng.normal(size=4)

            def value():
                return attention_embedding_loss(
                    states, targets, RegressionNet(weights=w, bias=b), kind
                ).value

            res = attention_embedding_loss(states, targets, RegressionNet(weights=w, bias=b), kind)
            assert_grad_close(res.grad_phi, fd_gradient(value, states), "states")
            assert_grad_close(res.grad_reg_weights, fd_gradient(value, w), "weights")
            assert_grad_close(res.grad_reg_bias, fd_gradient(value, b), "bias")

    def test_length_mismatch_rejected(self, rng):
        reg = RegressionNet(weights=np.zeros((4, 5)), bias=np.zeros(4))
        with pytest.raises(ValueError):
            attention_embedding_loss(rng.normal(size=(3, 5)), np.zeros((2, 4)), reg, DistanceKind.L2_SQUARED)

    def test_pair_net_rejected(self, rng):
        reg = random_pair_net(rng, 3, 2, 4)
        with pytest.raises(ValueError, match="one-vector"):
            attention_embedding_loss(rng.normal(size=(2, 5)), np.zeros((2, 4)), reg, DistanceKind.L2_SQUARED)


class TestJointRegressionLoss:
    def test_single_frame_reduces_to_per_token_sum(self, rng):
        phi = rng.normal(size=(1, 3))
        psi = rng.normal(size=(4, 2))
        targets = rng.normal(size=(4, 5))
        reg = random_pair_net(rng, 3, 2, 5)
        q = AlignmentPosterior(raw=np.ones((4, 1)))
        res = joint_regression_loss(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED)
        want = sum(
            distance(
                DistanceKind.L2_SQUARED,
                reg.weights @ np.concatenate([phi[0], psi[i]]) + reg.bias,
                targets[i],
            )[0]
            for i in range(4)
        )
        assert res.value == pytest.approx(want, abs=1e-12)

    def test_matches_oracle(self, rng):
        for kind in DistanceKind:
            phi = rng.normal(size=(3, 4))
            psi = rng.normal(size=(2, 3))
            q = random_posterior(rng, 2, 3)
            targets = rng.normal(size=(2, 5))
            reg = random_pair_net(rng, 4, 3, 5)
            res = joint_regression_loss(phi, psi, q, targets, reg, kind)
            want = oracle.exact_joint_loss(
                phi, psi, q.normalized, targets, reg.weights, reg.bias, kind.value
            )
            assert res.value == pytest.approx(want, abs=1e-12)

    def test_gradients_match_fd(self, rng):
        for kind in DistanceKind:
            phi = rng.normal(size=(4, 3))
            psi = rng.normal(size=(3, 2))
            q = random_posterior(rng, 3, 4)
            targets = rng.normal(size=(3, 5))
            w = rng.normal(size=(5, 5))
            b = rng.normal(size=5)

            def value():
                reg = RegressionNet(weights=w, bias=b, pair_split=3)
                return joint_regression_loss(phi, psi, q, targets, reg, kind).value

            reg = RegressionNet(weights=w, bias=b, pair_split=3)
            res = joint_regression_loss(phi, psi, q, targets, reg, kind)
            assert_grad_close(res.grad_phi, fd_gradient(value, phi), "phi")
            assert_grad_close(res.grad_psi, fd_gradient(value, psi), "psi")
            assert_grad_close(res.grad_reg_weights, fd_gradient(value, w), "weights")
            assert_grad_close(res.grad_reg_bias, fd_gradient(value, b), "bias")

    def test_raw_weights_mode(self, rng):
        phi = rng.normal(size=(3, 4))
        psi = rng.normal(size=(2, 3))
        q = random_posterior(rng, 2, 3)
        targets = rng.normal(size=(2, 5))
        reg = random_pair_net(rng, 4, 3, 5)
        raw_res = joint_regression_loss(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED, use_raw=True)
        norm_res = joint_regression_loss(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED)
        assert raw_res.value > norm_res.value  # raw rows sum to > 1 here

    def test_shape_mismatch_rejected(self, rng):
        q = random_posterior(rng, 2, 3)
        reg = random_pair_net(rng, 4, 3, 5)
        with pytest.raises(ValueError):
            joint_regression_loss(
                rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), q,
                rng.normal(size=(2, 5)), reg, DistanceKind.L2_SQUARED,
            )


class TestTokenSyncLoss:
    def test_single_frame_equals_joint(self, rng):
        for kind in DistanceKind:
            phi = rng.normal(size=(1, 4))
            psi = rng.normal(size=(3, 2))
            q = AlignmentPosterior(raw=np.ones((3, 1)))
            targets = rng.normal(size=(3, 5))
            reg = random_pair_net(rng, 4, 2, 5)
            a = token_sync_loss(phi, psi, q, targets, reg, kind)
            b = joint_regression_loss(phi, psi, q, targets, reg, kind)
            assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_jensen_upper_bound(self, rng):
        for _ in range(100):
            T = int(rng.integers(1, 6))
            N = int(rng.integers(1, 5))
            phi = rng.normal(size=(T, 4))
            psi = rng.normal(size=(N, 3))
            q = random_posterior(rng, N, T)
            targets = rng.normal(size=(N, 5))
            reg = random_pair_net(rng, 4, 3, 5)
            for kind in DistanceKind:
                ts = token_sync_loss(phi, psi, q, targets, reg, kind).value
                jt = joint_regression_loss(phi, psi, q, targets, reg, kind).value
                assert ts <= jt + 1e-12

    def test_l2_variance_decomposition(self, rng):
        for _ in range(100):
            T = int(rng.integers(1, 6))
            N = int(rng.integers(1, 5))
            phi = rng.normal(size=(T, 4))
            psi = rng.normal(size=(N, 3))
            q = random_posterior(rng, N, T)
            targets = rng.normal(size=(N, 5))
            reg = random_pair_net(rng, 4, 3, 5)
            jt = joint_regression_loss(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED).value
            ts = token_sync_loss(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED).value
            gap = l2_joint_token_sync_gap(phi, psi, q, reg)
            assert gap >= -1e-12
            assert jt == pytest.approx(ts + gap, abs=1e-9)

    def test_gradients_match_fd(self, rng):
        for kind in DistanceKind:
            phi = rng.normal(size=(4, 3))
            psi = rng.normal(size=(3, 2))
            q = random_posterior(rng, 3, 4)
            targets = rng.normal(size=(3, 5))
            w = rng.normal(size=(5, 5))
            b = rng.normal(size=5)

            def value():
                reg = RegressionNet(weights=w, bias=b, pair_split=3)
                return token_sync_loss(phi, psi, q, targets, reg, kind).value

            reg = RegressionNet(weights=w, bias=b, pair_split=3)
            res = token_sync_loss(phi, psi, q, targets, reg, kind)
            assert_grad_close(res.grad_phi, fd_gradient(value, phi), "phi")
            assert_grad_close(res.grad_psi, fd_gradient(value, psi), "psi")
            assert_grad_close(res.grad_reg_weights, fd_gradient(value, w), "weights")
            assert_grad_close(res.grad_reg_bias, fd_gradient(value, b), "bias")

    def test_activation_count_is_linear_in_tokens(self, rng):
        T, N = 6, 3
        phi = rng.normal(size=(T, 4))
        psi = rng.normal(size=(N, 3))
        q = random_posterior(rng, N, T)
        targets = rng.normal(size=(N, 5))
        reg = random_pair_net(rng, 4, 3, 5)
        ts = token_sync_loss(phi, psi, q, targets, reg, DistanceKind.L1_NORMALIZED)
        jt = joint_regression_loss(phi, psi, q, targets, reg, DistanceKind.L1_NORMALIZED)
        assert ts.n_regression_activations == N
        assert jt.n_regression_activations == T * N


class TestStopGradientContract:
    def test_no_posterior_gradient_slot(self, rng):
        phi = rng.normal(size=(3, 4))
        psi = rng.normal(size=(2, 3))
        q = random_posterior(rng, 2, 3)
        targets = rng.normal(size=(2, 5))
        reg = random_pair_net(rng, 4, 3, 5)
        for fn in (joint_regression_loss, token_sync_loss):
            res = fn(phi, psi, q, targets, reg, DistanceKind.L1_NORMALIZED)
            names = {f.name for f in dataclasses.fields(res)}
            assert names == {
                "value", "grad_phi", "grad_psi", "grad_reg_weights",
                "grad_reg_bias", "n_regression_activations",
            }
            assert not any("q" == n or "posterior" in n for n in names)

    def test_perturbing_posterior_changes_value_not_slots(self, rng):
        phi = rng.normal(size=(3, 4))
        psi = rng.normal(size=(2, 3))
        q = random_posterior(rng, 2, 3)
        targets = rng.normal(size=(2, 5))
        reg = random_pair_net(rng, 4, 3, 5)
        # shift mass within a row so normalized rows still sum to 1
        raw2 = q.raw.copy()
        raw2[0, 0] += 1e-3 * raw2.sum(axis=1)[0]
        raw2[0, 1] -= 1e-3 * raw2.sum(axis=1)[0]
        q2 = AlignmentPosterior(raw=raw2)
        for fn in (joint_regression_loss, token_sync_loss):
            a = fn(phi, psi, q, targets, reg, DistanceKind.L2_SQUARED)
            b = fn(phi, psi, q2, targets, reg, DistanceKind.L2_SQUARED)
            assert a.value != b.value
            assert {f.name for f in dataclasses.fields(a)} == {f.name for f in dataclasses.fields(b)}


class TestMultitaskCombine:
    def test_sigma_zero_returns_main_objects_unchanged(self):
        grads = {"w": np.array([1.0, 2.0])}
        called = []

        def aux_fn():
            called.append(True)
            return 1.0, {"w": np.ones(2)}

        value, out, aux = multitask_combine(2.5, grads, aux_fn, 0.0)
        assert value == 2.5 and aux == 0.0
        assert out is grads  # bit-identical: the same object, untouched
        assert not called  # auxiliary computation skipped entirely

    def test_zero_aux_keeps_main_value(self):
        value, _, _ = multitask_combine(3.0, {}, lambda: (0.0, {}), 1.0)
        assert value == 3.0

    def test_weighted_sum_example(self):
        value, grads, _ = multitask_combine(
            2.0, {"w": np.array([1.0])}, lambda: (0.5, {"w": np.array([2.0])}), 0.25
        )
        assert value == pytest.approx(2.125)
        np.testing.assert_allclose(grads["w"], [1.5])

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            multitask_combine(1.0, {}, lambda: (0.0, {}), -0.1)


def test_zero_target_absorption_scaling(rng):
    """Scaling targets and the regression net by c scales the squared-L2 loss by c^2."""
    phi = rng.normal(size=(3, 4))
    psi = rng.normal(size=(2, 3))
    q = random_posterior(rng, 2, 3)
    targets = rng.normal(size=(2, 5))
    w = rng.normal(size=(5, 7))
    b = rng.normal(size=5)
    c = 1.7
    base = joint_regression_loss(
        phi, psi, q, targets, RegressionNet(w, b, pair_split=4), DistanceKind.L2_SQUARED
    ).value
    scaled = joint_regression_loss(
        phi, psi, q, c * targets, RegressionNet(c * w, c * b, pair_split=4), DistanceKind.L2_SQUARED
    ).value
    assert scaled == pytest.approx(c * c * base, rel=1e-12)
