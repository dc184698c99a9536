import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mma.tensor import (
    GraphConsumedError,
    Tensor,
    backward,
    bce_with_logits,
    concat,
    cross_entropy,
    elementwise,
    exp,
    grad_check,
    log,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    smooth_l1,
    softmax,
    take,
    tmax,
    transpose,
    tsum,
)

from oracles import matmul_loops, softmax_direct


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def away_from_zero(rng, *shape, margin=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return Tensor(x)


class TestElementwise:
    def test_self_difference(self):
        x = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(elementwise("sub", x, x).data, [0, 0, 0])

    def test_relu(self):
        np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_broadcast_add_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
        out = elementwise("add", Tensor(a), Tensor(b)).data
        expected = [[a[i][j] + b[0][j] for j in range(3)] for i in range(2)]
        assert out.shape == (2, 3)
        np.testing.assert_array_equal(out, expected)

    def test_scale(self):
        np.testing.assert_array_equal(elementwise("scale", Tensor([1.0, -2.0]), factor=3.0).data, [3.0, -6.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise("pow", Tensor([1.0]), Tensor([1.0]))

    def test_overflow_is_an_error(self):
        with pytest.raises(FloatingPointError):
            exp(Tensor([1000.0]))
        with pytest.raises(FloatingPointError):
            mul(Tensor([1e200]), Tensor([1e200]))

    def test_log_of_zero_is_an_error(self):
        with pytest.raises(FloatingPointError):
            log(Tensor([0.0]))

    def test_broadcast_backward_sums_stretched_axes(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        w = rng.normal(size=(4, 3))
        backward(tsum(mul(elementwise("add", a, b), Tensor(w))))
        # gradient of sum_ij w_ij (a_ij + b_j) wrt b_j is sum_i w_ij
        expected = [[sum(w[i][j] for i in range(4)) for j in range(3)]]
        np.testing.assert_allclose(b.grad, expected, atol=1e-14)
        np.testing.assert_allclose(a.grad, w, atol=0)


class TestMatmul:
    def test_identity(self):
        v = Tensor([[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), v).data, v.data)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
        diff = np.abs(matmul(Tensor(a), Tensor(b)).data - matmul_loops(a.tolist(), b.tolist()))
        assert diff.max() < 1e-12

    def test_batched_broadcast(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 4, 5)), rng.normal(size=(1, 5, 3))
        out = matmul(Tensor(a), Tensor(b)).data
        for n in range(2):
            np.testing.assert_allclose(out[n], matmul_loops(a[n].tolist(), b[0].tolist()), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        backward(tsum(mul(matmul(a, b), Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-13)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-13)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_singleton(self):
        np.testing.assert_array_equal(softmax(Tensor([[3.7]])).data, [[1.0]])

    def test_direct_formula(self):
        out = softmax(Tensor([1.0, 2.0, 3.0])).data
        assert np.abs(out - softmax_direct([1.0, 2.0, 3.0])).max() < 1e-14

    def test_large_logits_stable(self):
        out = softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_empty_axis(self):
        with pytest.raises(ValueError):
            softmax(Tensor(np.zeros((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
    def test_rows_are_distributions(self, x):
        out = softmax(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_unused_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        backward(tsum(x), [x, unused])
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(mul(x, x))

    def test_second_backward_is_an_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = tsum(mul(x, x))
        backward(loss)
        with pytest.raises(GraphConsumedError):
            backward(loss)

    def test_reusing_released_intermediate_is_an_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        h = mul(x, x)
        backward(tsum(h))
        with pytest.raises(GraphConsumedError):
            tsum(h)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        h = mul(x, x)
        backward(tsum(h + h))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_gather_duplicate_rows_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        backward(tsum(take(x, [[1, 1, 0]])))
        np.testing.assert_array_equal(x.grad, [[1, 1], [2, 2], [0, 0]])

    def test_forward_is_bit_reproducible(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(16, 32)), rng.normal(size=(32, 8))
        outs = [softmax(matmul(Tensor(a), Tensor(b))).data for _ in range(3)]
        assert all(np.array_equal(outs[0], o) for o in outs[1:])


class TestGradCheck:
    def test_sum_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=5))
        assert grad_check(lambda t: tsum(t), x) < 1e-10

    def test_relu_away_from_kink(self):
        x = away_from_zero(np.random.default_rng(1), 6)
        assert grad_check(lambda t: tsum(relu(t)), x) < 1e-6

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: mul(t, t), Tensor([1.0, 2.0]))

    @pytest.mark.parametrize(
        "name,fn,shape",
        [
            ("add", lambda t: tsum(mul(t + Tensor(np.linspace(-1, 1, 4)), t)), (3, 4)),
            ("sub", lambda t: tsum(mul(Tensor(np.ones((1, 4))) - t, t)), (3, 4)),
            ("mul", lambda t: tsum(mul(mul(t, t), t)), (3, 4)),
            ("div", lambda t: tsum(t / (mul(t, t) + Tensor(1.0))), (3, 4)),
            ("scale", lambda t: tsum(mul(t * 2.5, t)), (5,)),
            ("relu", lambda t: tsum(mul(relu(t), t)), (3, 4)),
            ("sigmoid", lambda t: tsum(sigmoid(t)), (3, 4)),
            ("exp", lambda t: tsum(exp(t)), (3, 4)),
            ("log", lambda t: tsum(log(mul(t, t) + Tensor(0.5))), (3, 4)),
            ("matmul", lambda t: tsum(mul(matmul(t, transpose(t)), matmul(t, transpose(t)))), (3, 4)),
            ("softmax", lambda t: tsum(mul(softmax(t, axis=-1), Tensor(np.arange(4.0)))), (3, 4)),
            ("softmax_axis0", lambda t: tsum(mul(softmax(t, axis=0), Tensor(np.arange(12.0).reshape(3, 4)))), (3, 4)),
            ("log_softmax", lambda t: tsum(mul(log_softmax(t), Tensor(np.arange(4.0)))), (3, 4)),
            ("max", lambda t: tsum(mul(tmax(t, axis=0), tmax(t, axis=0))), (3, 4)),
            ("reshape", lambda t: tsum(mul(reshape(t, (4, 3)), Tensor(np.arange(12.0).reshape(4, 3)))), (3, 4)),
            ("take", lambda t: tsum(mul(take(t, [[0, 2], [2, 2]]), take(t, [[1, 0], [0, 1]]))), (3, 4)),
            ("concat", lambda t: tsum(mul(concat([t, mul(t, t)], axis=-1), concat([t, t], axis=-1))), (3, 4)),
            ("getitem", lambda t: tsum(mul(t[:, 1:3], t[:, 0:2])), (3, 4)),
            ("smooth_l1", lambda t: tsum(smooth_l1(t, np.zeros((3, 4)) + 0.3)), (3, 4)),
            ("bce", lambda t: tsum(bce_with_logits(t, (np.arange(12) % 2).reshape(3, 4))), (3, 4)),
            ("cross_entropy", lambda t: cross_entropy(t, [0, 3, 1]), (3, 4)),
        ],
    )
    def test_operation(self, name, fn, shape):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        x = away_from_zero(rng, *shape, margin=1e-2)
        if name == "max":
            # keep the column maxima well separated from the runners-up
            x = Tensor(x.data + np.arange(3.0)[:, None] * 3)
        if name == "smooth_l1":
            x = Tensor(x.data + np.where(np.abs(x.data - 0.3 - 1.0) < 1e-2, 0.05, 0.0))
        assert grad_check(fn, x) < 1e-4

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)), arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
    def test_matmul_chain_property(self, a, b):
        ta, tb = Tensor(a), Tensor(b)
        assert grad_check(lambda ts: tsum(mul(matmul(ts[0], ts[1]), matmul(ts[0], ts[1]))), [ta, tb]) < 1e-4
