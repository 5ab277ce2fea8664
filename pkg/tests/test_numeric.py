"""Dense-net numerics: forward/backward oracles, masked categoricals, Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentcfg.errors import InvalidActionError, InvalidMaskError, ShapeError
from agentcfg.numeric import (
    AdamState,
    DenseNet,
    MaskedCategorical,
    adam_step,
    clip_grad_norm,
    entropy,
    entropy_grad_logits,
    load_net,
    log_prob,
    log_prob_grad_logits,
    masked_softmax,
    sample,
    save_net,
)


def reference_forward(params, sizes, x):
    """Independent straight-line re-implementation of the affine+tanh chain."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        z = W @ h + b
        h = np.tanh(z) if layer < n_layers - 1 else z
    return h


class TestDenseNetForward:
    def test_zero_weights_give_zero(self):
        net = DenseNet([3, 4, 2])
        for p in net.params:
            p[...] = 0.0
        assert np.allclose(net.forward(np.ones(3)), 0.0)

    def test_identity_linear_layer(self):
        net = DenseNet([3, 3])
        net.params[0][...] = np.eye(3)
        net.params[1][...] = 0.0
        x = np.array([0.3, -1.2, 4.0])
        assert np.allclose(net.forward(x), x)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            sizes = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
            net = DenseNet(sizes, rng=rng)
            x = rng.normal(size=sizes[0])
            assert np.allclose(
                net.forward(x), reference_forward(net.params, net.sizes, x),
                atol=1e-12, rtol=0,
            )

    def test_shape_error(self):
        net = DenseNet([3, 2])
        with pytest.raises(ShapeError):
            net.forward(np.ones(4))


class TestDenseNetBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(1)
        for sizes in ([4, 8, 3], [2, 16, 16, 1], [5, 32, 4]):
            net = DenseNet(sizes, rng=rng)
            x = rng.normal(size=sizes[0])
            upstream = rng.normal(size=sizes[-1])
            grads, _ = net.backward(x, upstream)
            flat_analytic = np.concatenate([g.ravel() for g in grads])
            flat0 = net.get_flat()
            h = 1e-5
            # probe a deterministic subset of parameters for speed
            idx = rng.choice(net.n_params, size=min(120, net.n_params), replace=False)
            for i in idx:
                for sign, store in ((+1, "hi"), (-1, "lo")):
                    flat = flat0.copy()
                    flat[i] += sign * h
                    net.set_flat(flat)
                    val = float(upstream @ net.forward(x))
                    if sign > 0:
                        hi = val
                    else:
                        lo = val
                fd = (hi - lo) / (2 * h)
                denom = max(abs(fd), abs(flat_analytic[i]), 1e-8)
                assert abs(fd - flat_analytic[i]) / denom < 1e-4
            net.set_flat(flat0)

    def test_zero_upstream(self):
        net = DenseNet([3, 5, 2], rng=np.random.default_rng(2))
        grads, input_grad = net.backward(np.ones(3), np.zeros(2))
        assert all(np.allclose(g, 0.0) for g in grads)
        assert np.allclose(input_grad, 0.0)

    def test_linear_input_gradient(self):
        net = DenseNet([3, 2], rng=np.random.default_rng(3))
        upstream = np.array([1.0, -2.0])
        _, input_grad = net.backward(np.ones(3), upstream)
        assert np.allclose(input_grad, net.params[0].T @ upstream)


class TestParameterSerialization:
    def test_roundtrip(self, tmp_path):
        net = DenseNet([4, 8, 3], rng=np.random.default_rng(4))
        save_net(net, tmp_path / "net.params")
        loaded = load_net(tmp_path / "net.params")
        assert loaded.sizes == net.sizes
        assert np.array_equal(loaded.get_flat(), net.get_flat())


class TestMaskedSoftmax:
    def test_symmetric_case(self):
        d = MaskedCategorical(np.array([1.0, 1.0, 1.0]), np.array([1.0, 0.0, 1.0]))
        assert np.allclose(masked_softmax(d), [0.5, 0.0, 0.5])

    def test_two_equal(self):
        d = MaskedCategorical(np.zeros(2), np.ones(2))
        assert np.allclose(masked_softmax(d), [0.5, 0.5])

    def test_overflow_stability(self):
        d = MaskedCategorical(np.array([1000.0, 0.0]), np.ones(2))
        p = masked_softmax(d)
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)

    def test_all_masked_rejected(self):
        with pytest.raises(InvalidMaskError):
            MaskedCategorical(np.zeros(3), np.zeros(3))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, logits, shift):
        logits = np.array(logits)
        mask = np.ones(len(logits))
        mask[0] = 0.0 if len(logits) > 1 else 1.0
        p1 = masked_softmax(MaskedCategorical(logits, mask))
        p2 = masked_softmax(MaskedCategorical(logits + shift, mask))
        assert np.allclose(p1, p2, atol=1e-12)
        assert abs(p1.sum() - 1.0) < 1e-12
        assert p1[0] == 0.0 if len(logits) > 1 else True


class TestSampling:
    def test_forced_choice(self):
        d = MaskedCategorical(np.array([5.0, -3.0, 1.0]), np.array([0.0, 1.0, 0.0]))
        rng = np.random.default_rng(0)
        for _ in range(20):
            idx, lp = sample(d, rng)
            assert idx == 1
            assert lp == pytest.approx(0.0)

    def test_masked_never_drawn(self):
        d = MaskedCategorical(np.array([1.0, 1.0, 1.0]), np.array([1.0, 0.0, 1.0]))
        rng = np.random.default_rng(1)
        draws = [sample(d, rng)[0] for _ in range(10_000)]
        assert 1 not in draws

    def test_empirical_frequencies(self):
        logits = np.array([0.0, 1.0, 2.0])
        d = MaskedCategorical(logits, np.ones(3))
        probs = masked_softmax(d)
        rng = np.random.default_rng(2)
        n = 100_000
        counts = np.zeros(3)
        for _ in range(n):
            counts[sample(d, rng)[0]] += 1
        freq = counts / n
        for i in range(3):
            se = math.sqrt(probs[i] * (1 - probs[i]) / n)
            assert abs(freq[i] - probs[i]) <= 3 * se + 1e-12

    def test_log_prob_invalid_index(self):
        d = MaskedCategorical(np.zeros(3), np.array([1.0, 0.0, 1.0]))
        with pytest.raises(InvalidActionError):
            log_prob(d, 1)


class TestEntropy:
    def test_uniform_nine(self):
        d = MaskedCategorical(np.zeros(9), np.ones(9))
        assert entropy(d) == pytest.approx(math.log(9), abs=1e-12)

    def test_one_hot(self):
        d = MaskedCategorical(np.array([100.0, 0.0]), np.ones(2))
        assert entropy(d) == pytest.approx(0.0, abs=1e-12)

    def test_mask_reduces_support(self):
        d = MaskedCategorical(np.zeros(3), np.array([1.0, 0.0, 1.0]))
        assert entropy(d) == pytest.approx(math.log(2), abs=1e-12)


class TestDistributionGradients:
    def test_log_prob_grad_finite_difference(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=6)
        mask = np.array([1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
        g = log_prob_grad_logits(MaskedCategorical(logits, mask), 3)
        h = 1e-6
        for j in range(6):
            z_hi, z_lo = logits.copy(), logits.copy()
            z_hi[j] += h
            z_lo[j] -= h
            fd = (
                log_prob(MaskedCategorical(z_hi, mask), 3)
                - log_prob(MaskedCategorical(z_lo, mask), 3)
            ) / (2 * h)
            assert g[j] == pytest.approx(fd, abs=1e-6)
        assert g[2] == 0.0

    def test_entropy_grad_finite_difference(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=5)
        mask = np.array([1.0, 0.0, 1.0, 1.0, 1.0])
        g = entropy_grad_logits(MaskedCategorical(logits, mask))
        h = 1e-6
        for j in range(5):
            z_hi, z_lo = logits.copy(), logits.copy()
            z_hi[j] += h
            z_lo[j] -= h
            fd = (
                entropy(MaskedCategorical(z_hi, mask))
                - entropy(MaskedCategorical(z_lo, mask))
            ) / (2 * h)
            assert g[j] == pytest.approx(fd, abs=1e-6)
        assert g[1] == 0.0


class TestAdam:
    def test_zero_gradient_identity(self):
        params = [np.array([1.0, 2.0])]
        state = AdamState.for_params(params)
        adam_step(params, [np.zeros(2)], state, lr=0.1)
        assert np.allclose(params[0], [1.0, 2.0])

    def test_lr_zero_identity(self):
        params = [np.array([1.0, 2.0])]
        state = AdamState.for_params(params)
        adam_step(params, [np.array([0.5, -0.5])], state, lr=0.0)
        assert np.allclose(params[0], [1.0, 2.0])

    def test_first_step_direction(self):
        params = [np.array([0.0])]
        state = AdamState.for_params(params)
        adam_step(params, [np.array([3.0])], state, lr=0.01)
        # first Adam step is ~ -lr * sign(g)
        assert params[0][0] == pytest.approx(-0.01, rel=1e-6)

    def test_hand_computed_two_step_trace(self):
        # one parameter p=0, gradients g1=1.0, g2=-0.5, lr=0.1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p, m, v = 0.0, 0.0, 0.0
        for t, g in ((1, 1.0), (2, -0.5)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p -= lr * m_hat / (math.sqrt(v_hat) + eps)
        params = [np.array([0.0])]
        state = AdamState.for_params(params)
        adam_step(params, [np.array([1.0])], state, lr)
        adam_step(params, [np.array([-0.5])], state, lr)
        assert params[0][0] == pytest.approx(p, abs=1e-10)

    def test_shape_mismatch(self):
        params = [np.zeros(2)]
        state = AdamState.for_params(params)
        with pytest.raises(ShapeError):
            adam_step(params, [np.zeros(3)], state, 0.1)


class TestClipGradNorm:
    def test_scales_large(self):
        out = clip_grad_norm([np.array([3.0, 4.0])], 0.5)
        assert np.allclose(out[0], [0.3, 0.4])

    def test_leaves_small(self):
        g = [np.array([0.1, 0.1])]
        assert clip_grad_norm(g, 0.5) is g

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
    @settings(max_examples=100, deadline=None)
    def test_postclip_norm_bounded(self, values):
        g = [np.array(values)]
        out = clip_grad_norm(g, 0.5)
        assert np.sqrt(np.sum(out[0] ** 2)) <= 0.5 + 1e-12
