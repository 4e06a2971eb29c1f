from __future__ import annotations

import numpy as np
import pytest
from pytest import approx

from retroseq.tensor.engine import (
    NonFiniteError,
    ShapeError,
    Tensor,
    checked_mode,
    concat,
    grad,
    matmul,
    no_grad,
    precision,
)
from retroseq.tests import RetroSeqTest


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_softmax(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=float)
    for i in range(x.shape[0]):
        total = 0.0
        largest = max(x[i])
        for j in range(x.shape[1]):
            total += np.exp(x[i, j] - largest)
        for j in range(x.shape[1]):
            out[i, j] = np.exp(x[i, j] - largest) / total
    return out


class TestTensor(RetroSeqTest):
    """Class to test the tensor arithmetic and gradient tape."""

    def setUp(self):
        self.rng = self.get_rng(1)

    def test_construction(self):
        x = Tensor([[1, 2, 3], [4, 5, 6]])
        assert x.shape == (2, 3)
        assert x.dtype == np.float32
        assert x.grad is None
        assert not x.requires_grad

        with precision(np.float64):
            y = Tensor([1.0, 2.0])
        assert y.dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_matmul(self):
        identity = Tensor(np.eye(3))
        a = Tensor(self.rng.normal(size=(3, 2)))
        assert np.array_equal(matmul(identity, a).data, a.data)

        with precision(np.float64):
            a = Tensor(self.rng.normal(size=(3, 4)))
            b = Tensor(self.rng.normal(size=(4, 2)))
            np.testing.assert_allclose((a @ b).data, naive_matmul(a.data, b.data), rtol=1e-6)

        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matmul(self):
        with precision(np.float64):
            a = Tensor(self.rng.normal(size=(2, 3, 4)))
            b = Tensor(self.rng.normal(size=(4, 5)))
            out = (a @ b).data
        assert out.shape == (2, 3, 5)
        for i in range(2):
            np.testing.assert_allclose(out[i], naive_matmul(a.data[i], b.data), rtol=1e-6)

    def test_softmax(self):
        with precision(np.float64):
            x = self.rng.normal(size=(4, 7))
            out = Tensor(x).softmax(-1).data
        np.testing.assert_allclose(out, naive_softmax(x), rtol=1e-6)
        np.testing.assert_allclose(out.sum(-1), 1.0)

    def test_reductions(self):
        x = self.rng.normal(size=(3, 4))
        with precision(np.float64):
            t = Tensor(x)
            assert t.sum().item() == approx(sum(sum(row) for row in x))
            np.testing.assert_allclose(t.sum(axis=0).data, [sum(c) for c in x.T])
            np.testing.assert_allclose(t.mean(axis=-1).data, [sum(r) / 4 for r in x])

    def test_grad_sum(self):
        x = Tensor(self.rng.normal(size=(2, 3, 4)), requires_grad=True)
        grads = grad(x.sum(), {"x": x})
        assert np.array_equal(grads["x"], np.ones((2, 3, 4)))

    def test_grad_unreachable(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        grads = grad((x * 2).sum(), {"x": x, "unused": unused})
        assert np.array_equal(grads["unused"], np.zeros((2, 2)))
        np.testing.assert_allclose(grads["x"], [2, 2, 2])

    def test_grad_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            grad(x * 2, {"x": x})

    def test_grad_accumulates_shared_nodes(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x + x
        grads = grad(y.sum(), {"x": x})
        assert grads["x"][0] == approx(7.0)

    def test_two_layer_network_gradients(self):
        with precision(np.float64):
            params = {
                "w1": Tensor(self.rng.normal(size=(5, 8)), requires_grad=True),
                "b1": Tensor(self.rng.normal(size=8), requires_grad=True),
                "w2": Tensor(self.rng.normal(size=(8, 3)), requires_grad=True),
            }
            x = Tensor(self.rng.normal(size=(4, 5)))
            target = self.rng.normal(size=(4, 3))

            def loss_fn():
                hidden = (x @ params["w1"] + params["b1"]).tanh()
                return ((hidden @ params["w2"] - target) ** 2).mean()

            self.assert_gradients_match(loss_fn, params, max_coordinates=None)

    def test_elementwise_gradients(self):
        ops = {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / (b * b + 1.0),
            "pow": lambda a, b: (a * a + 1.0) ** 1.5 + b,
            "exp": lambda a, b: a.exp() * b,
            "log": lambda a, b: (a * a + 1.0).log() + b,
            "sqrt": lambda a, b: (a * a + 1.0).sqrt() * b,
            "tanh": lambda a, b: a.tanh() * b,
            "sigmoid": lambda a, b: a.sigmoid() - b,
            "softmax": lambda a, b: (a + b).softmax(-1),
            "log_softmax": lambda a, b: (a * b).log_softmax(-1),
            "matmul": lambda a, b: a @ b.T,
            "getitem": lambda a, b: a[1:, ::2] * b[0, ::2],
            "reshape": lambda a, b: a.reshape(4, 3) @ b.reshape(3, 4),
            "swapaxes": lambda a, b: a.swapaxes(0, 1) * b.T,
            "concat": lambda a, b: concat([a, b], axis=1),
            "masked_fill": lambda a, b: (a + b).masked_fill(np.eye(3, 4, dtype=bool), -1e30).softmax(-1),
            "broadcast": lambda a, b: a + b.sum(axis=0, keepdims=True),
            "mean": lambda a, b: a.mean(axis=0) * b.mean(axis=1).sum(),
        }
        for instance in range(100):
            for name, op in ops.items():
                with precision(np.float64):
                    params = {
                        "a": Tensor(self.rng.normal(size=(3, 4)), requires_grad=True),
                        "b": Tensor(self.rng.normal(size=(3, 4)), requires_grad=True),
                    }
                    out_shape = op(params["a"], params["b"]).shape
                    weights = Tensor(self.rng.normal(size=out_shape))

                    def loss_fn(op=op, params=params, weights=weights):
                        return (op(params["a"], params["b"]) * weights).sum()

                    self.assert_gradients_match(loss_fn, params, seed=instance)

    def test_masked_fill_blocks_gradient(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        mask = np.array([True, False, True, False])
        grads = grad(x.masked_fill(mask, 0.0).sum(), {"x": x})
        np.testing.assert_array_equal(grads["x"], [0, 1, 0, 1])

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2
        assert not y.requires_grad
        assert (x * 2).requires_grad

    def test_checked_mode(self):
        x = Tensor([0.0, 1.0])
        assert not np.all(np.isfinite(x.log().data))
        with checked_mode():
            with pytest.raises(NonFiniteError):
                x.log()
            with pytest.raises(NonFiniteError):
                Tensor([np.nan])

    def test_determinism(self):
        def run():
            rng = self.get_rng(7)
            w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
            x = Tensor(rng.normal(size=(2, 6)))
            loss = ((x @ w).softmax(-1) * (x @ w)).sum()
            return loss.item(), grad(loss, {"w": w})["w"]

        loss_a, grad_a = run()
        loss_b, grad_b = run()
        assert loss_a == loss_b
        assert np.array_equal(grad_a, grad_b)

    def test_reshape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)
