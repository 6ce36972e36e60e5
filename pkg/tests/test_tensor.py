import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from hetscale import tensor as T
from hetscale.tensor import Tensor

from conftest import fd_grad


def _check_grad(fn, *inputs, tol=1e-6):
    """Compare autodiff gradients of sum(fn(*inputs) * w) with finite differences."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    out_shape = fn(*[Tensor(x) for x in inputs]).shape
    w = np.random.default_rng(0).normal(size=out_shape)
    for k in range(len(inputs)):
        leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
        loss = T.tsum(fn(*leaves) * Tensor(w))
        T.backward(loss)

        def scalar(xk):
            args = [Tensor(x) for x in inputs]
            args[k] = Tensor(xk)
            return float(np.sum(fn(*args).data * w))

        expected = fd_grad(scalar, inputs[k])
        np.testing.assert_allclose(leaves[k].grad, expected, atol=tol, rtol=1e-5)


class TestGradients:
    def test_elementwise_with_broadcasting(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        _check_grad(lambda x, y: x * y + x - y, a, b)

    def test_matmul_batched_and_vector(self, rng):
        _check_grad(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
        _check_grad(T.matmul, rng.normal(size=(4,)), rng.normal(size=(4, 2)))
        _check_grad(T.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4,)))

    def test_linear(self, rng):
        x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
        _check_grad(T.linear, x, w, b)

    def test_gelu_softmax_layernorm(self, rng):
        _check_grad(T.gelu, rng.normal(size=(3, 5)) * 2)
        _check_grad(lambda x: T.softmax(x, axis=-1), rng.normal(size=(2, 3, 4)))
        _check_grad(T.layer_norm, rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6))

    def test_cross_entropy(self, rng):
        labels = np.array([0, 2, 1])
        for reduction in ("mean", "sum"):
            _check_grad(lambda z: T.cross_entropy(z, labels, reduction=reduction),
                        rng.normal(size=(3, 4)))

    def test_shape_ops(self, rng):
        x = rng.normal(size=(2, 3, 4))
        _check_grad(lambda t: t.reshape(6, 4).transpose(1, 0), x)
        _check_grad(lambda t: t[:, 1:], x)
        _check_grad(lambda t: t[:, [0, 0, 2]], x)
        _check_grad(lambda t: T.tsum(t, axis=1, keepdims=True), x)
        _check_grad(lambda t: T.mean(t, axis=(0, 2)), x)
        _check_grad(lambda t: T.broadcast_to(t[:, :1], (2, 5, 4)), x)

    def test_concat_and_scatter_add(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 1))
        _check_grad(lambda x, y: T.concat([x, y], axis=1), a, b)
        idx = np.array([0, 2])
        _check_grad(lambda base, v: T.scatter_add(base, idx, v), a, rng.normal(size=(2, 2)))

    def test_gelu_derivative_helpers(self):
        z = np.linspace(-4, 4, 41)
        h = 1e-5
        d1 = (T.gelu_np(z + h) - T.gelu_np(z - h)) / (2 * h)
        d2 = (T.gelu_grad_np(z + h) - T.gelu_grad_np(z - h)) / (2 * h)
        np.testing.assert_allclose(T.gelu_grad_np(z), d1, atol=1e-8)
        np.testing.assert_allclose(T.gelu_second_np(z), d2, atol=1e-8)


class TestBroadcastProperty:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
    def test_add_scalar_row_gradient_sums(self, x):
        row = np.ones(x.shape[-1])
        a = Tensor(x, requires_grad=True)
        r = Tensor(row, requires_grad=True)
        T.backward(T.tsum(a * r))
        np.testing.assert_allclose(r.grad, x.reshape(-1, x.shape[-1]).sum(axis=0), atol=1e-12)
        np.testing.assert_array_equal(a.grad, np.ones_like(x))


class TestEngine:
    def test_dtype_is_preserved(self):
        assert Tensor(np.ones(2)).dtype == np.float64
        assert Tensor(np.ones(2, dtype=np.float32)).dtype == np.float32
        assert Tensor([1, 2]).dtype == np.float32

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        T.backward(T.tsum(y + y))
        assert x.grad[0] == pytest.approx(8.0)

    def test_leaf_grads_accumulate_across_backward_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tsum(x * 3.0))
        T.backward(T.tsum(x * 3.0))
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_second_backward_on_same_graph_fails(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        loss = T.tsum(x * x)
        T.backward(loss)
        with pytest.raises(RuntimeError):
            T.backward(loss)

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x * 2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert y._node is None
        assert T.is_grad_enabled()

    def test_retain_grad_on_intermediate(self):
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        h = (x * 3.0).retain_grad()
        T.backward(T.tsum(h * h))
        np.testing.assert_allclose(h.grad, [6.0, -6.0])

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(T.tsum(y))
        assert x.grad[0] == 1.0


class TestHvp:
    def test_quadratic_is_exact(self, rng):
        a = rng.normal(size=(5, 5))
        a = a + a.T
        p, v = rng.normal(size=5), rng.normal(size=5)

        def f(t):
            return T.tsum(t * T.matmul(Tensor(a), t)) * 0.5

        np.testing.assert_allclose(T.hvp(f, p, v), a @ v, atol=1e-8)

    def test_nonquadratic_matches_analytic(self, rng):
        # f(p) = sum gelu(p): Hessian is diag(gelu'').
        p, v = rng.normal(size=6), rng.normal(size=6)
        hv = T.hvp(lambda t: T.tsum(T.gelu(t)), p, v)
        # Central differences carry an O(eps^2) truncation error.
        np.testing.assert_allclose(hv, T.gelu_second_np(p) * v, atol=2e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.hvp(lambda t: T.tsum(t), np.zeros(3), np.zeros(4))
