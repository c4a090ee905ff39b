import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from centroid_rehearsal.errors import (
    ContractError,
    NonFiniteGradientError,
    ShapeError,
)
from centroid_rehearsal.nn import (
    GradientTape,
    Network,
    TaskHead,
    cross_entropy,
    sgd_step,
    softmax,
)

from conftest import numeric_param_gradient, relative_agreement


def hand_forward(net, X):
    """Independent oracle: explicit per-element matrix arithmetic."""
    out = []
    for x in X:
        a = list(x)
        for l, (W, b) in enumerate(zip(net.weights, net.biases)):
            z = []
            for j in range(W.shape[1]):
                s = b[j]
                for i in range(W.shape[0]):
                    s += a[i] * W[i, j]
                z.append(s)
            if l < len(net.weights) - 1:
                a = [v if v > 0 else 0.0 for v in z]
            else:
                a = z
        out.append(a)
    return np.array(out)


class TestForward:
    def test_zero_weights_give_zero_features(self, rng):
        net = Network([4, 5, 3], seed=0)
        for W in net.weights:
            W[...] = 0.0
        F, _ = net.forward(rng.normal(size=(6, 4)))
        assert np.all(F == 0.0)

    def test_identity_layer_passes_nonnegative_input(self):
        net = Network([3, 3], seed=0)
        net.weights[0] = np.eye(3)
        net.biases[0] = np.zeros(3)
        X = np.array([[0.5, 0.0, 2.0], [1.0, 3.0, 0.1]])
        F, _ = net.forward(X)
        np.testing.assert_allclose(F, X)

    def test_matches_hand_rolled_oracle(self, rng):
        net = Network([5, 7, 4], seed=11)
        X = rng.normal(size=(3, 5))
        F, _ = net.forward(X)
        np.testing.assert_allclose(F, hand_forward(net, X), atol=1e-12)

    def test_forward_never_mutates_parameters(self, rng):
        net = Network([4, 6, 3], seed=2)
        before = [W.copy() for W in net.weights] + [b.copy() for b in net.biases]
        net.forward(rng.normal(size=(5, 4)))
        after = list(net.weights) + list(net.biases)
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_shape_mismatch_raises(self, rng):
        net = Network([4, 3], seed=0)
        with pytest.raises(ShapeError):
            net.forward(rng.normal(size=(2, 5)))


class TestClassify:
    def test_uniform_softmax_on_zero_logits(self):
        head = TaskHead(0, 4, 5, seed=0)
        head.weight[...] = 0.0
        _, probs = head.classify(np.ones((3, 4)))
        np.testing.assert_allclose(probs, 0.2)

    def test_saturated_logits(self):
        p = softmax(np.array([[1000.0, 0.0, 0.0]]))
        assert p[0, 0] >= 1 - 1e-6

    def test_matches_exp_normalize_oracle(self, rng):
        head = TaskHead(1, 6, 4, seed=3)
        F = rng.normal(size=(5, 6))
        logits, probs = head.classify(F)
        raw = np.exp(logits)
        np.testing.assert_allclose(probs, raw / raw.sum(axis=1, keepdims=True), atol=1e-9)

    def test_feature_width_mismatch(self):
        head = TaskHead(0, 6, 2, seed=0)
        with pytest.raises(ShapeError):
            head.classify(np.ones((2, 5)))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(
        st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=3, max_size=3),
        min_size=1, max_size=6,
    ))
    def test_softmax_rows_sum_to_one(self, logits):
        rows = softmax(np.array(logits, dtype=np.float64))
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = cross_entropy(probs, np.array([0, 1]))
        assert loss <= 1e-6

    def test_uniform_prediction_log4(self):
        probs = np.full((3, 4), 0.25)
        loss, _ = cross_entropy(probs, np.array([0, 1, 2]))
        assert loss == pytest.approx(np.log(4.0), abs=1e-12)

    def test_zero_probability_is_clamped(self):
        probs = np.array([[0.0, 1.0]])
        loss, _ = cross_entropy(probs, np.array([0]))
        assert np.isfinite(loss)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            cross_entropy(np.full((2, 3), 1 / 3), np.array([0, 3]))

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        _, grad = cross_entropy(softmax(logits), labels)

        def loss_fn():
            return cross_entropy(softmax(logits), labels)[0]

        num = numeric_param_gradient(loss_fn, [logits], step=1e-6)
        assert relative_agreement([grad], num, tol=1e-5) == 1.0


class TestBackward:
    def test_zero_upstream_leaves_tape_unchanged(self, rng):
        net = Network([4, 5, 3], seed=0)
        tape = GradientTape(net)
        F, cache = net.forward(rng.normal(size=(2, 4)))
        net.backward(cache, np.zeros_like(F), tape)
        assert all(np.all(g == 0) for _, g in tape.buffers())

    def test_accumulation_is_additive(self, rng):
        net = Network([4, 5, 3], seed=1)
        X = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 3))
        tape_once = GradientTape(net)
        F, cache = net.forward(X)
        net.backward(cache, g, tape_once)
        tape_twice = GradientTape(net)
        F, cache = net.forward(X)
        net.backward(cache, g, tape_twice)
        net.backward(cache, g, tape_twice)
        for (_, a), (_, b) in zip(tape_once.buffers(), tape_twice.buffers()):
            np.testing.assert_array_equal(2 * a, b)

    def test_accumulation_order_independent(self, rng):
        net = Network([4, 5, 3], seed=1)
        X1, X2 = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        g1, g2 = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))

        def accumulate(order):
            tape = GradientTape(net)
            for X, g in order:
                _, cache = net.forward(X)
                net.backward(cache, g, tape)
            return [b.copy() for _, b in tape.buffers()]

        fwd = accumulate([(X1, g1), (X2, g2)])
        rev = accumulate([(X2, g2), (X1, g1)])
        for a, b in zip(fwd, rev):
            np.testing.assert_array_equal(a, b)

    def test_missing_cache_is_contract_error(self, rng):
        net = Network([4, 3], seed=0)
        with pytest.raises(ContractError):
            net.backward(None, np.zeros((2, 3)), GradientTape(net))

    def test_stale_cache_after_step(self, rng):
        net = Network([4, 3], seed=0)
        tape = GradientTape(net)
        F, cache = net.forward(rng.normal(size=(2, 4)))
        net.backward(cache, np.ones_like(F), tape)
        sgd_step(net, {}, tape, 0.1)
        with pytest.raises(ContractError):
            net.backward(cache, np.ones_like(F), tape)

    def test_network_ce_gradient_matches_finite_differences(self, rng):
        net = Network([5, 6, 4], seed=4)
        head = TaskHead(0, 4, 3, seed=5)
        X = rng.normal(size=(6, 5))
        labels = rng.integers(0, 3, size=6)

        def loss_fn():
            F, _ = net.forward(X)
            _, probs = head.classify(F)
            return cross_entropy(probs, labels)[0]

        tape = GradientTape(net)
        tape.ensure_head(head)
        F, cache = net.forward(X)
        _, probs = head.classify(F)
        _, d_logits = cross_entropy(probs, labels)
        dF = head.backward(F, d_logits, tape)
        net.backward(cache, dF, tape)

        arrays = list(net.weights) + list(net.biases) + [head.weight, head.bias]
        analytic = tape.net_w + tape.net_b + [tape.head_w[0], tape.head_b[0]]
        numeric = numeric_param_gradient(loss_fn, arrays)
        assert relative_agreement(analytic, numeric) >= 0.95


class TestSgdStep:
    def test_zero_gradients_keep_parameters(self):
        net = Network([3, 2], seed=0)
        before = net.weights[0].copy()
        sgd_step(net, {}, GradientTape(net), 0.5)
        np.testing.assert_array_equal(net.weights[0], before)

    def test_zero_lr_keeps_parameters(self, rng):
        net = Network([3, 2], seed=0)
        tape = GradientTape(net)
        F, cache = net.forward(rng.normal(size=(2, 3)))
        net.backward(cache, np.ones_like(F), tape)
        before = net.weights[0].copy()
        sgd_step(net, {}, tape, 0.0)
        np.testing.assert_array_equal(net.weights[0], before)

    def test_single_parameter_analytic_step(self):
        net = Network([1, 1], seed=0)
        net.weights[0][...] = 1.0
        tape = GradientTape(net)
        tape.net_w[0][...] = 2.0
        sgd_step(net, {}, tape, 0.1)
        assert net.weights[0][0, 0] == pytest.approx(1.0 - 0.2, abs=1e-15)

    def test_tape_zeroed_after_step(self, rng):
        net = Network([3, 2], seed=0)
        tape = GradientTape(net)
        F, cache = net.forward(rng.normal(size=(2, 3)))
        net.backward(cache, np.ones_like(F), tape)
        sgd_step(net, {}, tape, 0.1)
        assert all(np.all(g == 0) for _, g in tape.buffers())

    def test_non_finite_gradient_aborts(self):
        net = Network([3, 2], seed=0)
        tape = GradientTape(net)
        tape.net_w[0][0, 0] = np.nan
        before = net.weights[0].copy()
        with pytest.raises(NonFiniteGradientError):
            sgd_step(net, {}, tape, 0.1)
        np.testing.assert_array_equal(net.weights[0], before)
