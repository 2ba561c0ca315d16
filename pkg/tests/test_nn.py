import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xairefine import nn
from xairefine.errors import FormatError, InputError, NumericError

from conftest import central_diff, linear_model, random_mlp


def _hand_forward(model, x):
    """Scalar loops, no matrix products."""
    h = list(x)
    for li, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = []
        for r in range(W.shape[0]):
            s = b[r]
            for c in range(W.shape[1]):
                s += W[r, c] * h[c]
            z.append(s)
        h = [max(v, 0.0) for v in z] if li < model.n_layers - 1 else z
    return np.array(h)


class TestForward:
    def test_diagonal_linear(self):
        m = linear_model([[2, 0], [0, 3]])
        np.testing.assert_array_equal(nn.forward(m, [1.0, 1.0]), [2.0, 3.0])

    def test_zero_weights_give_bias(self):
        m = linear_model(np.zeros((3, 4)), [0.5, -1.0, 2.0])
        x = np.random.default_rng(1).normal(size=4)
        np.testing.assert_array_equal(nn.forward(m, x), [0.5, -1.0, 2.0])

    def test_two_layer_at_origin(self):
        m = nn.init_model(5, [4], 3, seed=0)
        m.biases[0][:] = [0.3, -0.2, 0.1, -0.4]
        m.biases[1][:] = [0.05, -0.1, 0.2]
        expect = _hand_forward(m, np.zeros(5))
        np.testing.assert_allclose(nn.forward(m, np.zeros(5)), expect, rtol=0, atol=1e-15)
        # x = 0: logits are W2 relu(b1) + b2
        np.testing.assert_allclose(expect, m.weights[1] @ np.maximum(m.biases[0], 0) + m.biases[1])

    def test_matches_hand_evaluation(self):
        m = random_mlp(3, [6, 5, 4, 3])
        x = np.random.default_rng(2).normal(size=6)
        np.testing.assert_allclose(nn.forward(m, x), _hand_forward(m, x), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            nn.forward(nn.init_model(3, [], 2), np.zeros(4))

    def test_pure(self):
        m = random_mlp(0, [8, 6, 3])
        x = np.random.default_rng(0).normal(size=8)
        assert nn.forward(m, x).tobytes() == nn.forward(m, x).tobytes()

    def test_batch_rows_match_single(self):
        m = random_mlp(1, [4, 5, 3])
        X = np.random.default_rng(1).normal(size=(7, 4))
        np.testing.assert_allclose(nn.forward(m, X), np.stack([nn.forward(m, x) for x in X]),
                                   atol=1e-14)

    def test_nonfinite_reports_layer(self):
        m = random_mlp(1, [3, 4, 2])
        m.weights[1][0, 0] = np.inf
        with pytest.raises(NumericError) as info:
            nn.forward(m, np.ones(3))
        assert info.value.layer == 1


class TestCrossEntropy:
    def test_uniform(self):
        assert nn.cross_entropy(np.zeros(10), 3) == pytest.approx(np.log(10), abs=1e-15)

    def test_saturated(self):
        assert nn.cross_entropy([100.0, 0.0], 0) < 1e-6

    def test_two_logits(self):
        direct = -np.log(np.e / (np.e + np.e**2))
        assert nn.cross_entropy([1.0, 2.0], 0) == pytest.approx(direct, rel=1e-14)
        assert direct == pytest.approx(1.313262, abs=1e-6)

    def test_label_range(self):
        with pytest.raises(InputError):
            nn.cross_entropy([0.0, 1.0], 2)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.integers(0, 7))
    def test_non_negative(self, logits, label):
        label %= len(logits)
        assert nn.cross_entropy(logits, label) >= 0.0

    def test_uniform_exact_any_k(self):
        for K in (2, 3, 7, 10):
            assert nn.cross_entropy(np.full(K, 3.25), 0) == pytest.approx(np.log(K), rel=1e-15)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def _away_from_kinks(model, x, margin=1e-3):
    cache = nn._forward_cache(model, x[None, :])
    return all(np.all(np.abs(z) >= margin) for z in cache.pre[:-1])


class TestBackward:
    def test_linear_softmax_closed_form(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(4, 6))
        b = rng.normal(size=4)
        m = linear_model(W, b)
        x = rng.normal(size=6)
        g = nn.backward(m, x, 2)
        onehot = np.eye(4)[2]
        resid = nn.softmax(W @ x + b) - onehot
        np.testing.assert_allclose(g.input_grad, W.T @ resid, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(g.weight_grads[0], np.outer(resid, x), rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(g.bias_grads[0], resid, rtol=1e-13, atol=1e-15)

    def test_finite_differences(self):
        worst = 0.0
        checked = 0
        for seed in range(100):
            m = random_mlp(seed, [5, 6, 3])
            x = np.random.default_rng(1000 + seed).normal(size=5)
            if not _away_from_kinks(m, x):
                continue
            label = seed % 3
            g = nn.backward(m, x, label)
            fd = central_diff(lambda v: nn.cross_entropy(nn.forward(m, v), label), x)
            worst = max(worst, _rel_err(g.input_grad, fd))
            checked += 1
        assert checked >= 80
        assert worst < 1e-4

    def test_relu_zero_subgradient(self):
        # pre-activation of hidden unit 0 is exactly 0 at x = 0
        W1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        b1 = np.array([0.0, 1.0])
        W2 = np.array([[1.0, 1.0], [-1.0, 1.0]])
        m = nn.ModelState([W1, W2], [b1, np.zeros(2)])
        g = nn.logit_gradient(m, np.zeros(2), 0)
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_batch_mean(self):
        m = random_mlp(4, [3, 4, 2])
        X = np.random.default_rng(4).normal(size=(5, 3))
        y = np.array([0, 1, 1, 0, 1])
        g = nn.backward(m, X, y)
        singles = [nn.backward(m, X[i], y[i]) for i in range(5)]
        for li in range(2):
            np.testing.assert_allclose(g.weight_grads[li],
                                       np.mean([s.weight_grads[li] for s in singles], 0), atol=1e-14)


class TestLogitGradient:
    def test_linear_row(self):
        W = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(nn.logit_gradient(linear_model(W), np.ones(4), 1), W[1])

    def test_zero_weights(self):
        m = nn.ModelState([np.zeros((3, 4)), np.zeros((2, 3))], [np.ones(3), np.ones(2)])
        np.testing.assert_array_equal(nn.logit_gradient(m, np.ones(4), 0), np.zeros(4))

    def test_finite_differences(self):
        for seed in range(20):
            m = random_mlp(seed, [4, 5, 5, 3])
            x = np.random.default_rng(seed).normal(size=4)
            if not _away_from_kinks(m, x):
                continue
            for k in range(3):
                fd = central_diff(lambda v: nn.forward(m, v)[k], x)
                assert _rel_err(nn.logit_gradient(m, x, k), fd) < 1e-4

    def test_class_range(self):
        with pytest.raises(InputError):
            nn.logit_gradient(linear_model(np.eye(2)), np.zeros(2), 5)


class TestInputGradientPenalty:
    def test_matches_finite_differences_in_parameters(self):
        m = random_mlp(7, [4, 6, 5, 3])
        X = np.random.default_rng(7).normal(size=(3, 4))
        cls = np.array([0, 2, 1])
        coef = np.array([0.0, 1.0, 0.5, 0.0]) / 3
        g = nn.input_gradient_penalty(m, X, cls, coef)
        for li in range(m.n_layers):
            def value(P, li=li):
                W = [w.copy() for w in m.weights]
                W[li] = P
                return nn.input_gradient_penalty(nn.ModelState(W, m.biases), X, cls, coef).loss
            fd = central_diff(value, m.weights[li], h=1e-5)
            np.testing.assert_allclose(g.weight_grads[li], fd, rtol=1e-5, atol=1e-8)

    def test_value(self):
        W = np.array([[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]])
        m = linear_model(W)
        g = nn.input_gradient_penalty(m, np.zeros((2, 3)), [0, 1], [0.0, 1.0, 1.0])
        assert g.loss == pytest.approx((4 + 9) + (0 + 16))


class TestSgdStep:
    def test_lr_zero(self):
        m = random_mlp(0, [3, 4, 2])
        g = nn.backward(m, np.ones(3), 0)
        assert nn.sgd_step(m, g, 0.0).equals(m)

    def test_single_weight(self):
        m = linear_model([[1.0], [0.0]])
        g = nn.GradientBundle([np.array([[2.0], [0.0]])], [np.zeros(2)])
        assert nn.sgd_step(m, g, 0.1).weights[0][0, 0] == pytest.approx(0.8)

    def test_two_steps_equal_summed_update(self):
        m = random_mlp(1, [3, 2])
        g = nn.backward(m, np.ones(3), 1)
        two = nn.sgd_step(nn.sgd_step(m, g, 0.1), g, 0.1)
        one = nn.sgd_step(m, g.scaled(2.0), 0.1)
        for a, b in zip(two.params(), one.params()):
            np.testing.assert_allclose(a, b, atol=1e-15)

    def test_nonfinite_gradient(self):
        m = linear_model([[1.0, 2.0], [0.0, 1.0]])
        g = nn.GradientBundle([np.array([[np.nan, 0], [0, 0]])], [np.zeros(2)])
        with pytest.raises(NumericError):
            nn.sgd_step(m, g, 0.1)


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        m = random_mlp(5, [7, 5, 3])
        m.weights[0][0, 0] = 0.1 + 0.2
        m.weights[0][0, 1] = 5e-324
        nn.save_model(m, tmp_path / "m.json")
        assert nn.load_model(tmp_path / "m.json").equals(m)

    def test_schema(self, tmp_path):
        m = nn.init_model(3, [2], 2, seed=0)
        nn.save_model(m, tmp_path / "m.json")
        obj = json.loads((tmp_path / "m.json").read_text())
        assert set(obj) == {"layers", "input_dim", "num_classes"}
        assert set(obj["layers"][0]) == {"rows", "cols", "weights", "bias"}
        assert obj["layers"][0]["rows"] == 2 and obj["layers"][0]["cols"] == 3
        assert obj["layers"][0]["weights"] == list(m.weights[0].ravel())

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"layers": [{"rows": 2, "cols": 2, "weights": [1], '
                                           '"bias": [0, 0]}], "input_dim": 2, "num_classes": 2}')
        with pytest.raises(FormatError):
            nn.load_model(tmp_path / "bad.json")


class TestInit:
    def test_glorot_range_and_seed(self):
        a = nn.init_model(10, [6], 2, seed=3)
        b = nn.init_model(10, [6], 2, seed=3)
        assert a.equals(b)
        assert np.all(np.abs(a.weights[0]) <= np.sqrt(6 / 16))
        assert np.all(a.biases[0] == 0)

    def test_rejects_single_class(self):
        with pytest.raises(InputError):
            nn.ModelState([np.ones((1, 3))], [np.zeros(1)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_check_property(seed):
    m = random_mlp(seed, [3, 4, 3])
    x = np.random.default_rng(seed + 1).normal(size=3)
    if not _away_from_kinks(m, x):
        return
    fd = central_diff(lambda v: nn.cross_entropy(nn.forward(m, v), 1), x)
    assert _rel_err(nn.backward(m, x, 1).input_grad, fd) < 1e-4
