import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minet.tensor import (
    GraphConsumedError,
    Tensor,
    backward,
    concat,
    finite_diff_jvp,
    grad_check,
    no_grad,
    relu,
    sigmoid,
    softmax,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_linear_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        backward((2.0 * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_relu_gate(self):
        x = leaf([-1.0, 3.0])
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_square_matches_central_difference(self):
        x = leaf([1.0, 2.0])
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

        eps = 1e-5
        fd = []
        for i in range(2):
            xp, xm = x.data.copy(), x.data.copy()
            xp[i] += eps
            xm[i] -= eps
            fd.append(((xp * xp).sum() - (xm * xm).sum()) / (2 * eps))
        np.testing.assert_allclose(x.grad, fd, atol=1e-6)

    def test_affine_recorded_as_two_ops(self):
        x = leaf([0.3, -1.2, 5.0])
        backward((x * 2.5 + 4.0).sum())
        np.testing.assert_array_equal(x.grad, [2.5, 2.5, 2.5])

    def test_fan_out_accumulates(self):
        x = leaf([1.0, -2.0, 7.0])
        backward(x.sum() + x.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_self_product_accumulates(self):
        x = leaf([3.0])
        backward((x * x).sum())
        assert x.grad[0] == 6.0

    def test_gradients_accumulate_across_calls_until_zeroed(self):
        x = leaf([1.0, 1.0])
        backward(x.sum())
        backward((3.0 * x).sum())
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])
        x.zero_grad()
        assert x.grad is None

    def test_returns_gradient_map(self):
        x, y = leaf([1.0]), leaf([2.0])
        grads = backward((x * y).sum())
        assert grads[id(x)].data[0] == 2.0
        assert grads[id(y)].data[0] == 1.0

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0)

    def test_graph_consumed(self):
        x = leaf([1.0, 2.0])
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(GraphConsumedError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_deep_chain_does_not_recurse(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(y.sum())
        assert x.grad[0] == 1.0

    def test_broadcast_gradient_reduced_to_operand_shape(self):
        a = leaf(np.ones((2, 3, 4, 4)))
        s = leaf(np.full((2, 3, 1, 1), 2.0))
        backward((a * s).sum())
        np.testing.assert_array_equal(s.grad, np.full((2, 3, 1, 1), 16.0))
        np.testing.assert_array_equal(a.grad, np.full((2, 3, 4, 4), 2.0))


class TestElementwise:
    def test_sigmoid_values(self):
        s = sigmoid(Tensor([0.0, 800.0, -800.0])).data
        assert s[0] == 0.5
        assert s[1] == 1.0 and s[2] == 0.0
        assert np.all(np.isfinite(s))

    def test_sigmoid_is_monotone_in_unit_interval(self):
        s = sigmoid(Tensor(np.linspace(-30, 30, 1001))).data
        assert np.all(np.diff(s) > 0)
        assert np.all((s > 0) & (s < 1))

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(Tensor(rng.standard_normal((2, 3, 4, 5))), axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: (sigmoid(x) * x).sum(),
            lambda x: (softmax(x, axis=1) * x).sum(),
            lambda x: (x.abs() * x).mean(),
            lambda x: (x.exp() / (x * x + 1.0)).sum(),
            lambda x: (concat([x, x * 2.0], axis=1)[:, 1:3] ** 2).sum(),
            lambda x: x.reshape(2, -1).mean(axis=1).sum(),
        ],
    )
    def test_grad_check(self, rng, fn):
        x = Tensor(rng.standard_normal((2, 3, 2, 2)))
        assert grad_check(fn, x, 1e-5) <= 1e-7


class TestFiniteDiffJVP:
    def test_linear_map_exact(self, rng):
        x = Tensor(rng.standard_normal(5))
        v = Tensor(rng.standard_normal(5))
        jv = finite_diff_jvp(lambda t: t * 3.0, x, v, 1e-4).data
        np.testing.assert_allclose(jv, 3.0 * v.data, rtol=1e-10)

    def test_square(self):
        jv = finite_diff_jvp(lambda t: t * t, Tensor([1.0, 2.0]), Tensor([1.0, 1.0]), 1e-4).data
        np.testing.assert_allclose(jv, [2.0, 4.0], rtol=1e-10)

    def test_constant(self):
        jv = finite_diff_jvp(lambda t: Tensor(np.full(3, 7.0)), Tensor(np.zeros(3)), Tensor(np.ones(3)), 1e-3)
        np.testing.assert_array_equal(jv.data, 0.0)

    def test_linear_is_eps_independent(self, rng):
        A = rng.standard_normal((4, 4))
        x, v = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        f = lambda t: Tensor(A @ t.data)  # noqa: E731
        a = finite_diff_jvp(f, x, v, 1e-2).data
        b = finite_diff_jvp(f, x, v, 1e-6).data
        np.testing.assert_allclose(a, b, rtol=1e-8)

    def test_errors(self):
        with pytest.raises(ValueError):
            finite_diff_jvp(lambda t: t, Tensor(np.zeros(3)), Tensor(np.zeros(2)))
        with pytest.raises(ValueError):
            finite_diff_jvp(lambda t: t, Tensor(np.zeros(3)), Tensor(np.zeros(3)), 0.0)


class TestGradCheck:
    def test_sum_of_squares(self, rng):
        x = Tensor(rng.standard_normal((2, 2)))
        assert grad_check(lambda t: (t * t).sum(), x, 1e-5) <= 1e-7

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            grad_check(lambda t: t.sum(), Tensor(np.zeros(2, dtype=np.float32)))

    def test_detects_wrong_gradient(self, rng):
        from minet.tensor import Tensor as T

        def bad(t):
            return T._from_op(np.asarray(t.data.sum() ** 2), (t,), lambda g: (g * np.ones_like(t.data),), "bad")

        assert grad_check(bad, Tensor(rng.standard_normal(3) + 3.0)) > 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_ops_grad_check(n, c, h, w, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((n, c, h, w)))
    s = Tensor(r.standard_normal((n, c, 1, 1)))
    assert grad_check(lambda a, b: ((a * b + b) / (a * a + 1.0)).sum(), [x, s], 1e-5) <= 1e-6
