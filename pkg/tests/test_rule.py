from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from traceprop.errors import ConfigError, ContrastiveBatchError, DimensionError, NumericError
from traceprop.neuron import LifParams
from traceprop.rule import (
    TraceState,
    apply_update,
    layer_gradient,
    local_loss,
    log_softmax_rows,
    loss_signal,
    modulatory_signal,
    pairwise_logits,
    pairwise_targets,
    postsynaptic_factors,
    softmax_rows,
    update_traces,
)

E = np.e


class TestTraces:
    def test_hand_value(self):
        tr = update_traces(TraceState(np.array([[1.0]]), np.array([[0.0]]), 0.5),
                           np.array([[1.0]]), np.array([[1.0]]))
        assert tr.eps[0, 0] == 1.5 and tr.eps_tilde[0, 0] == 1.0

    def test_memoryless(self):
        tr = TraceState(np.full((2, 2), 3.0), np.full((2, 2), 3.0), 0.0)
        s = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = update_traces(tr, s, 1 - s)
        np.testing.assert_array_equal(out.eps, s)
        np.testing.assert_array_equal(out.eps_tilde, 1 - s)

    @pytest.mark.parametrize("beta", [0.3, 0.8, 0.95])
    def test_geometric_closed_form(self, beta):
        tr = TraceState.zeros((1, 1), beta, np.float64)
        one = np.ones((1, 1))
        for t in range(1, 30):
            tr = update_traces(tr, one, one)
            assert tr.eps[0, 0] == pytest.approx((1 - beta ** t) / (1 - beta), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 0.99), st.integers(0, 2 ** 31 - 1))
    def test_bounded(self, beta, seed):
        rng = np.random.default_rng(seed)
        tr = TraceState.zeros((3, 4), beta, np.float64)
        for _ in range(50):
            tr = update_traces(tr, (rng.random((3, 4)) < 0.5) * 1.0, (rng.random((3, 4)) < 0.5) * 1.0)
        bound = 1 / (1 - beta) + 1e-9
        assert tr.eps.min() >= 0 and tr.eps.max() <= bound and tr.eps_tilde.max() <= bound

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            update_traces(TraceState.zeros((2, 2), 0.5), np.zeros((2, 3)), np.zeros((2, 2)))

    def test_bad_beta(self):
        with pytest.raises(ConfigError):
            TraceState.zeros((1, 1), 1.5)


class TestLossSignal:
    def test_identity_logits(self):
        np.testing.assert_array_equal(pairwise_logits(np.eye(2), np.eye(2)), np.eye(2))

    def test_hand_logits(self):
        z = pairwise_logits(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(z, [[1, 3], [0, 1]])

    def test_batch_one_rejected(self):
        with pytest.raises(ContrastiveBatchError):
            pairwise_logits(np.ones((1, 3)), np.ones((1, 3)))
        with pytest.raises(ContrastiveBatchError):
            pairwise_targets(np.ones((1, 3)))

    def test_feature_mismatch(self):
        with pytest.raises(DimensionError):
            pairwise_logits(np.ones((2, 3)), np.ones((2, 4)))

    def test_one_hot_targets(self):
        y = pairwise_targets(np.eye(2))
        a, b = E / (E + 1), 1 / (E + 1)
        np.testing.assert_allclose(y, [[a, b], [b, a]], rtol=1e-15)
        np.testing.assert_allclose(y, [[0.731, 0.269], [0.269, 0.731]], atol=5e-4)

    def test_identical_rows_uniform(self):
        for sim in ("dot", "neg_euclidean"):
            np.testing.assert_allclose(pairwise_targets(np.ones((4, 3)), sim), 0.25)

    def test_neg_euclidean_is_distance(self):
        e = np.array([[0.0, 0.0], [3.0, 4.0]])
        y = pairwise_targets(e, "neg_euclidean")
        np.testing.assert_allclose(y[0], softmax_rows(np.array([[0.0, -5.0]]))[0])

    def test_unknown_similarity(self):
        with pytest.raises(ConfigError):
            pairwise_targets(np.eye(2), "cosine")

    def test_uniform_loss(self):
        assert local_loss(np.zeros((2, 2)), np.eye(2)) == pytest.approx(np.log(2))
        assert local_loss(np.zeros((2, 2)), np.eye(2), "sum") == pytest.approx(2 * np.log(2))

    def test_loss_minimum_is_entropy(self):
        z = np.array([[0.3, -1.0, 2.0], [0.0, 0.5, 0.1], [1.0, 1.0, -2.0]])
        y = softmax_rows(z)
        entropy = -np.mean(np.sum(y * np.log(y), axis=1))
        assert local_loss(z, y) == pytest.approx(entropy)
        np.testing.assert_allclose(modulatory_signal(z, y), 0.0, atol=1e-15)

    def test_loss_errors(self):
        with pytest.raises(NumericError):
            local_loss(np.array([[np.nan, 0], [0, 0]]), np.eye(2))
        with pytest.raises(DimensionError):
            local_loss(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ConfigError):
            local_loss(np.zeros((2, 2)), np.eye(2), "max")

    def test_uniform_mod(self):
        np.testing.assert_allclose(modulatory_signal(np.zeros((2, 2)), np.eye(2)),
                                   [[-0.5, 0.5], [0.5, -0.5]])

    def test_log_softmax_stable(self):
        out = log_softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(0, 3)),
           arrays(np.float64, (4, 5), elements=st.floats(0, 3)),
           arrays(np.float64, (4, 2), elements=st.floats(0, 3)))
    def test_rows_normalized_and_gibbs(self, eps, eps_t, prev):
        sig = loss_signal(eps, eps_t, prev)
        np.testing.assert_allclose(sig.y.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_rows(sig.z).sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(sig.mod.sum(axis=1), 0.0, atol=1e-6)
        entropy = -np.mean(np.sum(sig.y * np.log(np.maximum(sig.y, 1e-300)), axis=1))
        assert local_loss(sig.z, sig.y) >= entropy - 1e-9


def _random_case(rng, batch=4, n_pre=3, n_post=5):
    p = LifParams(alpha=0.9, v_th=1.0)
    tr = TraceState(rng.uniform(0, 2, (batch, n_post)), rng.uniform(0, 2, (batch, n_post)), 0.8)
    v = rng.normal(1.0, 0.5, (batch, n_post))
    vt = rng.normal(1.0, 0.5, (batch, n_post))
    s_in = (rng.random((batch, n_pre)) < 0.5) * 1.0
    s_trg = (rng.random((batch, n_pre)) < 0.5) * 1.0
    prev = rng.uniform(0, 2, (batch, 3))
    return p, tr, v, vt, s_in, s_trg, prev


def _direct_gradient(mod, tr, v, vt, s_in, s_trg, p):
    """Quadruple-loop form of the three-factor rule, mean reduction."""
    from traceprop.neuron import surrogate_derivative

    n = mod.shape[0]
    d, dt = surrogate_derivative(v, p), surrogate_derivative(vt, p)
    out = np.zeros((s_in.shape[1], v.shape[1]))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for b in range(n):
                for bp in range(n):
                    out[i, j] += mod[b, bp] * tr.eps_tilde[bp, j] * d[b, j] * s_in[b, i]
                    out[i, j] += mod[b, bp] * tr.eps[b, j] * dt[bp, j] * s_trg[bp, i]
    return out / n


class TestGradient:
    def test_matches_direct_sum(self):
        rng = np.random.default_rng(3)
        p, tr, v, vt, s_in, s_trg, prev = _random_case(rng)
        sig = loss_signal(tr.eps, tr.eps_tilde, prev)
        np.testing.assert_allclose(layer_gradient(sig.mod, tr, v, vt, s_in, s_trg, p),
                                   _direct_gradient(sig.mod, tr, v, vt, s_in, s_trg, p),
                                   rtol=1e-12, atol=1e-15)

    def test_zero_mod(self):
        rng = np.random.default_rng(0)
        p, tr, v, vt, s_in, s_trg, _ = _random_case(rng)
        np.testing.assert_array_equal(layer_gradient(np.zeros((4, 4)), tr, v, vt, s_in, s_trg, p), 0)

    def test_silent_presynaptic(self):
        rng = np.random.default_rng(0)
        p, tr, v, vt, s_in, _, prev = _random_case(rng)
        mod = loss_signal(tr.eps, tr.eps_tilde, prev).mod
        z = np.zeros_like(s_in)
        np.testing.assert_array_equal(layer_gradient(mod, tr, v, vt, z, z, p), 0)

    def test_sum_reduction_scales(self):
        rng = np.random.default_rng(1)
        p, tr, v, vt, s_in, s_trg, prev = _random_case(rng)
        mod = loss_signal(tr.eps, tr.eps_tilde, prev).mod
        mean = layer_gradient(mod, tr, v, vt, s_in, s_trg, p)
        total = layer_gradient(mod, tr, v, vt, s_in, s_trg, p, "sum")
        np.testing.assert_allclose(total, 4 * mean, rtol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        p, tr, v, vt, s_in, s_trg, prev = _random_case(rng, batch=5)
        perm = rng.permutation(5)
        sig = loss_signal(tr.eps, tr.eps_tilde, prev)
        trp = TraceState(tr.eps[perm], tr.eps_tilde[perm], tr.beta)
        sigp = loss_signal(trp.eps, trp.eps_tilde, prev[perm])
        for a, b in ((sig.z, sigp.z), (sig.y, sigp.y), (sig.mod, sigp.mod)):
            np.testing.assert_allclose(a[np.ix_(perm, perm)], b, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(
            layer_gradient(sig.mod, tr, v, vt, s_in, s_trg, p),
            layer_gradient(sigp.mod, trp, v[perm], vt[perm], s_in[perm], s_trg[perm], p),
            rtol=1e-10, atol=1e-14)

    def test_shape_errors(self):
        rng = np.random.default_rng(0)
        p, tr, v, vt, s_in, s_trg, prev = _random_case(rng)
        mod = np.zeros((4, 4))
        with pytest.raises(DimensionError):
            postsynaptic_factors(mod, tr, v[:, :2], vt, p)
        with pytest.raises(DimensionError):
            layer_gradient(mod, tr, v, vt, s_in[:3], s_trg, p)
        with pytest.raises(ContrastiveBatchError):
            postsynaptic_factors(np.zeros((1, 1)), tr, v[:1], vt[:1], p)


class TestApplyUpdate:
    def test_zero_gradient(self):
        W = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(apply_update(W, np.zeros_like(W), 1e-4), W)

    def test_default_learning_rate(self):
        W = np.zeros((2, 2))
        dW = np.array([[1.0, -2.0], [0.5, 0.0]])
        np.testing.assert_allclose(apply_update(W, dW, 1e-4), -1e-4 * dW)

    def test_composes_additively(self):
        W = np.ones((2, 2))
        dW = np.full((2, 2), 3.0)
        twice = apply_update(apply_update(W, dW, 0.25), dW, 0.25)
        np.testing.assert_allclose(twice, W - 0.5 * dW)

    def test_in_place(self):
        W = np.ones(3)
        out = apply_update(W, np.ones(3), 0.5, out=W)
        assert out is W and np.all(W == 0.5)

    def test_errors(self):
        with pytest.raises(DimensionError):
            apply_update(np.ones(2), np.ones(3), 0.1)
        with pytest.raises(ConfigError):
            apply_update(np.ones(2), np.ones(2), 0.0)
