import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foggrid import nn
from foggrid.nn import ParamSet, Tape


def scalar_dense(W, b, X):
    """Entrywise dot-product oracle for dense_forward."""
    out = []
    for row in X:
        out.append([sum(W[o][i] * row[i] for i in range(len(row))) + b[o] for o in range(len(b))])
    return out


class TestDenseForward:
    def test_identity(self):
        assert nn.dense_forward(np.eye(2), np.zeros(2), np.array([[3.0, 4.0]])).tolist() == [[3.0, 4.0]]

    def test_zero_weight(self):
        assert nn.dense_forward(np.zeros((2, 2)), np.array([1.0, 2.0]), np.array([[9.0, 9.0]])).tolist() == [[1.0, 2.0]]

    def test_random_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        W, b, X = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=(1, 2))
        np.testing.assert_allclose(nn.dense_forward(W, b, X), scalar_dense(W, b, X), rtol=0, atol=1e-14)

    def test_batched_rows_match_unbatched(self):
        rng = np.random.default_rng(4)
        W, b, X = rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=(4, 6, 3))
        y = nn.dense_forward(W, b, X)
        for k in range(4):
            np.testing.assert_allclose(y[k], nn.dense_forward(W, b, X[k]), atol=1e-14)

    def test_shape_error_names_shapes(self):
        with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(1, 2\)"):
            nn.dense_forward(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 2)))


class TestActivations:
    @pytest.mark.parametrize("x, want", [(5.0, 5.0), (-1.0, -0.2), (0.0, 0.0)])
    def test_leaky_relu(self, x, want):
        assert nn.leaky_relu(np.array([[x]]), 0.2)[0, 0] == pytest.approx(want, abs=0)

    @pytest.mark.parametrize("x, want", [(-3.0, 0.0), (7.0, 7.0)])
    def test_relu_scalar(self, x, want):
        assert nn.relu(np.array([[x]]))[0, 0] == want

    def test_relu_mixed_matrix(self):
        x = np.array([[-1.5, 2.0, 0.0], [3.25, -0.1, 4.0]])
        want = [[max(0.0, v) for v in row] for row in x.tolist()]
        assert nn.relu(x).tolist() == want


class TestMaskedSoftmax:
    def test_single_neighbor(self):
        assert nn.masked_softmax(np.array([[3.7, -2.0]]), np.array([[1, 0]])).tolist() == [[1.0, 0.0]]

    def test_equal_logits(self):
        assert nn.masked_softmax(np.array([[1.3, 1.3]]), np.array([[1, 1]])).tolist() == [[0.5, 0.5]]

    def test_direct_formula(self):
        out = nn.masked_softmax(np.array([[math.log(2), math.log(1), 99.0]]), np.array([[1, 1, 0]]))
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3, 0.0]], rtol=0, atol=1e-15)
        assert out[0, 2] == 0.0

    def test_all_zero_row_rejected(self):
        with pytest.raises(ValueError, match="self-loops"):
            nn.masked_softmax(np.zeros((2, 2)), np.array([[1, 0], [0, 0]]))

    def test_large_logits_are_stable(self):
        out = nn.masked_softmax(np.array([[1000.0, 999.0, -1e6]]), np.array([[1, 1, 1]]))
        assert np.isfinite(out).all()

    @settings(max_examples=100, deadline=None)
    @given(
        logits=arrays(np.float64, (5, 5), elements=st.floats(-50, 50)),
        mask=arrays(np.int8, (5, 5), elements=st.integers(0, 1)),
    )
    def test_rows_sum_to_one_and_respect_mask(self, logits, mask):
        mask = mask.copy()
        np.fill_diagonal(mask, 1)
        out = nn.masked_softmax(logits, mask)
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
        assert np.all(out[mask == 0] == 0.0)


class TestBackward:
    def test_constant_loss_gives_zero_gradients(self):
        params = ParamSet({"W": np.ones((2, 2)), "b": np.zeros(2)})
        tape = Tape()
        p = tape.watch(params)
        loss = nn.mse(nn.dense(np.zeros((1, 2)), p["W"], p["b"]), np.zeros((1, 2)))
        grads = nn.backward(loss)
        # loss = mean(b^2) with b = 0 -> every gradient vanishes
        assert all(np.all(grads[k] == 0) for k in grads)

    def test_quadratic_single_dense_matches_analytic(self):
        rng = np.random.default_rng(0)
        W, b, x, y = rng.normal(size=(1, 3)), rng.normal(size=1), rng.normal(size=(1, 3)), rng.normal(size=(1, 1))
        tape = Tape()
        p = tape.watch({"W": W, "b": b})
        grads = nn.backward(nn.mse(nn.dense(x, p["W"], p["b"]), y))
        yhat = (W @ x[0] + b)[0]
        np.testing.assert_allclose(grads["W"], 2 * (yhat - y[0, 0]) * x, rtol=1e-13)
        np.testing.assert_allclose(grads["b"], [2 * (yhat - y[0, 0])], rtol=1e-13)

    def test_missing_tape_is_usage_error(self):
        with pytest.raises(nn.TapeError):
            nn.backward(nn.mse(np.ones((1, 1)), np.zeros((1, 1))))

    def test_unused_parameter_gets_zero_gradient(self):
        tape = Tape()
        p = tape.watch({"W": np.eye(2), "b": np.zeros(2), "unused": np.ones(3)})
        grads = nn.backward(nn.mse(nn.dense(np.ones((1, 2)), p["W"], p["b"]), np.zeros((1, 2))))
        assert list(grads) == ["W", "b", "unused"]
        assert np.all(grads["unused"] == 0)


def _layer_case(seed):
    rng = np.random.default_rng(seed)
    return rng, ParamSet(
        {
            "W": rng.normal(size=(4, 3)),
            "b": rng.normal(size=4),
            "W2": rng.normal(size=(4, 4)),
            "attn": rng.normal(size=8),
        }
    )


@pytest.mark.parametrize("seed", range(5))
class TestPerLayerGradients:
    """Each differentiable op against central differences."""

    def test_dense_relu(self, seed):
        rng, params = _layer_case(seed)
        X, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        pre = nn.dense_forward(params["W"], params["b"], X)
        assert np.abs(pre).min() > 1e-3  # away from kinks
        err = nn.gradient_check(lambda p: nn.mse(nn.relu(nn.dense(X, p["W"], p["b"])), y), params)
        assert err < 1e-5

    def test_matmul_and_add(self, seed):
        rng, params = _layer_case(seed)
        H, y = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
        err = nn.gradient_check(lambda p: nn.mse(nn.add(nn.matmul(H, p["W2"]), p["b"]), y), params)
        assert err < 1e-6

    def test_attention_softmax_chain(self, seed):
        rng, params = _layer_case(seed)
        H = rng.normal(size=(5, 4))
        mask = (rng.random((5, 5)) < 0.5).astype(float)
        np.fill_diagonal(mask, 1)
        y = rng.normal(size=(5, 4))

        def f(p):
            Z = nn.matmul(H, p["W2"])
            alpha = nn.masked_softmax(nn.leaky_relu(nn.attention_logits(Z, p["attn"]), 0.2), mask)
            return nn.mse(nn.matmul(alpha, Z), y)

        assert nn.gradient_check(f, params) < 1e-5

    def test_gather_rows(self, seed):
        rng, params = _layer_case(seed)
        X = rng.normal(size=(3, 6, 3))
        idx = rng.integers(0, 4, size=(3, 6))
        y = rng.normal(size=(3, 6))
        err = nn.gradient_check(lambda p: nn.mse(nn.gather_rows(nn.dense(X, p["W"], p["b"]), idx), y), params)
        assert err < 1e-6


class TestSgdStep:
    def test_lr_zero_is_identity(self):
        params = ParamSet({"w": np.arange(3.0)})
        assert nn.sgd_step(params, {"w": np.ones(3)}, 0.0).equals(params)

    def test_direct_formula(self):
        out = nn.sgd_step(ParamSet({"p": np.array([1.0])}), {"p": np.array([2.0])}, 0.1)
        assert out["p"][0] == pytest.approx(0.8, abs=1e-15)

    def test_random_entrywise(self):
        rng = np.random.default_rng(1)
        params = ParamSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)})
        grads = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
        out = nn.sgd_step(params, grads, 0.05)
        for k in params:
            for idx in np.ndindex(params[k].shape):
                assert out[k][idx] == params[k][idx] - 0.05 * grads[k][idx]

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.sgd_step(ParamSet({"a": np.zeros(2)}), {"a": np.zeros(3)}, 0.1)
        with pytest.raises(nn.ShapeError):
            nn.sgd_step(ParamSet({"a": np.zeros(2)}), {"b": np.zeros(2)}, 0.1)


class TestGradientCheck:
    def test_linear_function_is_exact(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(4, 3))
        params = ParamSet({"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)})
        assert nn.gradient_check(lambda p: nn.total(nn.dense(X, p["W"], p["b"])), params) < 1e-9

    def test_dense_relu_composite(self):
        rng = np.random.default_rng(5)
        X, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        params = ParamSet({"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)})
        assert np.abs(nn.dense_forward(params["W"], params["b"], X)).min() > 1e-3
        assert nn.gradient_check(lambda p: nn.mse(nn.relu(nn.dense(X, p["W"], p["b"])), y), params) < 1e-5


class TestInitParams:
    LAYERS = [("W", (32, 32)), ("b", (32,)), ("h", (5, 32)), ("hb", (5,))]

    def test_deterministic(self):
        assert nn.init_params(self.LAYERS, 7).equals(nn.init_params(self.LAYERS, 7))

    def test_different_seed_differs(self):
        assert not nn.init_params(self.LAYERS, 7).equals(nn.init_params(self.LAYERS, 8))

    def test_biases_zero(self):
        p = nn.init_params(self.LAYERS, 0)
        assert np.all(p["b"] == 0) and np.all(p["hb"] == 0)

    def test_glorot_variance(self):
        w = nn.init_params(self.LAYERS, 11)["W"]
        limit = math.sqrt(6 / 64)
        theory = limit**2 / 3
        assert abs(w.var() - theory) <= 0.2 * theory
        assert np.abs(w).max() <= limit


def test_paramset_is_immutable():
    p = ParamSet({"w": np.zeros(2)})
    with pytest.raises(ValueError):
        p["w"][0] = 1.0
