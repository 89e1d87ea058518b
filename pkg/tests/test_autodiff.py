"""Gradient checks and graph-behavior tests for the autodiff core."""

import numpy as np
import pytest

from locodiff.autodiff import Tensor, check_finite, concat, no_grad


def numeric_grad(f, x, eps=1e-3):
    """Central finite differences of scalar f at float32 array x."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        g[idx] = (f(xp.astype(np.float32)) - f(xm.astype(np.float32))) / (2 * eps)
    return g


def check_op(op, shapes, rtol=1e-2, atol=1e-3, rng=None):
    rng = rng or np.random.default_rng(0)
    xs = [rng.standard_normal(s).astype(np.float32) for s in shapes]
    ts = [Tensor.param(x) for x in xs]
    loss = op(*ts)
    loss.backward()
    for i, t in enumerate(ts):
        def f(v, i=i):
            args = [Tensor(x) for x in xs]
            args[i] = Tensor(v)
            return float(op(*args).data)
        num = numeric_grad(f, xs[i])
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


class TestGradients:
    def test_add_mul(self):
        check_op(lambda a, b: (a * b + a).sum(), [(3, 4), (3, 4)])

    def test_broadcast_add(self):
        check_op(lambda a, b: (a + b).square().sum(), [(5, 3), (3,)])

    def test_matmul(self):
        check_op(lambda a, b: (a @ b).sum(), [(4, 3), (3, 2)])

    def test_relu_tanh_exp(self):
        check_op(lambda a: (a.relu() + a.tanh() + (a * 0.1).exp()).sum(), [(6,)])

    def test_div_square(self):
        check_op(lambda a, b: (a / (b.square() + 2.0)).sum(), [(4,), (4,)])

    def test_mean_axis(self):
        check_op(lambda a: a.mean(axis=1).square().sum(), [(3, 5)])

    def test_reshape_concat(self):
        check_op(lambda a, b: concat([a.reshape(2, 6), b], axis=1).sum(),
                 [(3, 4), (2, 2)])

    def test_minimum_clip(self):
        check_op(lambda a, b: (a.minimum(b) + a.clip(-0.5, 0.5)).sum(),
                 [(7,), (7,)])

    def test_mlp_composite(self):
        rng = np.random.default_rng(7)
        w1 = rng.standard_normal((4, 8)).astype(np.float32)
        check_op(lambda a, w: ((a @ w).relu() @ w.reshape(8, 4)).tanh().sum(),
                 [(2, 4), (4, 8)], rng=rng)

    def test_many_random_instances(self):
        # acceptance-style sweep: >= 20 random instances per layer type
        rng = np.random.default_rng(42)
        for i in range(20):
            check_op(lambda a, b: ((a @ b).relu()).square().mean(),
                     [(3, 4), (4, 2)], rng=np.random.default_rng(i))


class TestGraph:
    def test_backward_accumulates_shared_node(self):
        a = Tensor.param(np.array([2.0], np.float32))
        y = a * a + a * 3.0      # dy/da = 2a + 3 = 7
        y.sum().backward()
        np.testing.assert_allclose(a.grad, [7.0], rtol=1e-6)

    def test_diamond_graph_single_accumulation(self):
        a = Tensor.param(np.array([1.5], np.float32))
        b = a * 2.0
        y = (b + b).sum()        # dy/da = 4
        y.backward()
        np.testing.assert_allclose(a.grad, [4.0], rtol=1e-6)

    def test_no_grad_blocks_graph(self):
        a = Tensor.param(np.ones(3, np.float32))
        with no_grad():
            y = (a * 2.0).sum()
        assert y._parents == ()

    def test_backward_requires_scalar(self):
        a = Tensor.param(np.ones((2, 2), np.float32))
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_float32_everywhere(self):
        a = Tensor(np.arange(4, dtype=np.float64))
        assert a.data.dtype == np.float32
        assert (a + a).data.dtype == np.float32

    def test_grad_accumulates_across_backwards(self):
        a = Tensor.param(np.array([1.0], np.float32))
        (a * 2.0).sum().backward()
        (a * 3.0).sum().backward()
        np.testing.assert_allclose(a.grad, [5.0])


def test_check_finite():
    check_finite("ok", np.ones(3))
    with pytest.raises(FloatingPointError):
        check_finite("bad", np.array([1.0, np.nan]))
