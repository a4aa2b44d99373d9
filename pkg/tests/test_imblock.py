import numpy as np
import pytest

from minet.imblock import (
    IMBlockConfig,
    MLEParams,
    im_block_forward,
    mle_forward,
    picard_iterate,
    resblock_chain_forward,
    resblock_forward,
)
from minet.layers import parameter_count
from minet.tensor import NonFiniteError, Tensor, grad_check


def zero_mle(c=4, d=1):
    p = MLEParams.init(np.random.default_rng(0), c, d)
    for conv in (p.conv1, p.conv2):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    return p


class TestMLE:
    def test_zero_field(self, rng):
        y = mle_forward(Tensor(rng.standard_normal((1, 4, 6, 6))), zero_mle())
        np.testing.assert_array_equal(y.data, 0.0)

    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_shape(self, rng, d):
        p = MLEParams.init(rng, 64, d)
        assert mle_forward(Tensor(np.zeros((1, 64, 17, 13))), p).shape == (1, 64, 17, 13)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            mle_forward(Tensor(np.zeros((1, 3, 8, 8))), MLEParams.init(rng, 4, 1))

    @pytest.mark.parametrize("d", [1, 2])
    def test_grad_check(self, rng, d):
        p = MLEParams.init(rng, 3, d)
        x = Tensor(rng.standard_normal((1, 3, 5, 6)))
        wts = rng.standard_normal((1, 3, 5, 6))
        assert grad_check(lambda a: (mle_forward(a, p) * wts).sum(), x, 1e-5) <= 1e-4


class TestIMBlock:
    def test_zero_field_is_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 6, 6)))
        y, trace = im_block_forward(x, zero_mle(), IMBlockConfig(T=5))
        np.testing.assert_array_equal(y.data, x.data)
        assert trace.residuals == [0.0] * 5

    def test_scalar_geometric_surrogate(self):
        # brute-force iterate of g <- 1 + 0.5 g, compared to closed form 2 - 0.5**k
        g, brute = 1.0, []
        for _ in range(12):
            g = 1.0 + 0.5 * g
            brute.append(g)
        closed = [2 - 0.5**k for k in range(1, 13)]
        np.testing.assert_allclose(brute, closed, rtol=0, atol=1e-15)

        out, trace = picard_iterate(Tensor([1.0]), lambda t: t * 0.5, T=12, eta=1.0)
        assert abs(out.data[0] - 1.99975586) < 1e-8
        assert out.data[0] == closed[-1]
        assert len(trace.residuals) == 12

    def test_T1_equals_resblock_bitwise(self, rng):
        p = MLEParams.init(rng, 4, 2)
        x = Tensor(rng.standard_normal((2, 4, 7, 5)))
        y_im, _ = im_block_forward(x, p, IMBlockConfig(T=1, eta=0.7, dilation=2))
        y_res = resblock_forward(x, p, eta=0.7)
        assert np.array_equal(y_im.data, y_res.data)

    def test_resblock_surrogate(self):
        out, _ = picard_iterate(Tensor([1.0]), lambda t: t * 0.5, T=1)
        assert out.data[0] == 1.5

    @pytest.mark.parametrize("T", [1, 3])
    @pytest.mark.parametrize("d", [1, 2, 5])
    def test_shape_preserved(self, rng, T, d):
        p = MLEParams.init(rng, 4, d)
        y, tr = im_block_forward(Tensor(rng.standard_normal((1, 4, 12, 11))), p, IMBlockConfig(T, 1.0, d))
        assert y.shape == (1, 4, 12, 11)
        assert len(tr.residuals) == T and min(tr.residuals) >= 0

    def test_parameter_count_independent_of_T(self, rng):
        p = MLEParams.init(rng, 8, 1)
        n = parameter_count(p)
        for T in (1, 4, 12):
            im_block_forward(Tensor(rng.standard_normal((1, 8, 6, 6))), p, IMBlockConfig(T))
            assert parameter_count(p) == n

    def test_linear_contraction_trace_and_limit(self, rng):
        n = 6
        B = rng.standard_normal((n, n))
        A = (B + B.T) / 2
        A *= 0.8 / np.abs(np.linalg.eigvalsh(A)).max()
        g0 = rng.standard_normal((1, n))
        from minet.layers import LinearParams, linear

        lp = LinearParams(Tensor(A), None)
        out, trace = picard_iterate(Tensor(g0), lambda t: linear(t, lp), T=150)
        exact = np.linalg.solve(np.eye(n) - A, g0[0])
        np.testing.assert_allclose(out.data[0], exact, rtol=1e-9, atol=1e-12)
        # additive slack: g itself carries ~1e-16 relative rounding
        floor = 1e-14 * np.linalg.norm(exact)
        steps = trace.step_norms
        for a, b in zip(steps, steps[1:]):
            assert b <= 0.8 * a * (1 + 1e-6) + floor

    @pytest.mark.parametrize("T", [1, 2, 4])
    def test_unrolled_gradient(self, rng, T):
        p = MLEParams.init(rng, 2, 1)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        wts = rng.standard_normal((1, 2, 4, 4))
        assert grad_check(lambda a: (im_block_forward(a, p, IMBlockConfig(T))[0] * wts).sum(), x, 1e-5) <= 1e-4

    def test_weight_gradient_through_recursion(self, rng):
        p = MLEParams.init(rng, 2, 1)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        wts = rng.standard_normal((1, 2, 4, 4))

        def f(w):
            p.conv2.weight = w
            return (im_block_forward(x, p, IMBlockConfig(3))[0] * wts).sum()

        assert grad_check(f, p.conv2.weight, 1e-5) <= 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_iteration(self):
        with pytest.raises(NonFiniteError, match="iteration 1"):
            picard_iterate(Tensor([1.0]), lambda t: t * 1e200, T=5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IMBlockConfig(T=0)
        with pytest.raises(ValueError):
            IMBlockConfig(eta=0.0)


def test_resblock_chain_uses_unshared_blocks(rng):
    blocks = [MLEParams.init(rng, 4, 1) for _ in range(3)]
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    y = x
    for b in blocks:
        y = resblock_forward(y, b)
    np.testing.assert_array_equal(resblock_chain_forward(x, blocks).data, y.data)
    assert sum(parameter_count(b) for b in blocks) == 3 * parameter_count(blocks[0])
