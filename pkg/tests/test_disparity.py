import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mma.disparity import FDCParams, fdc_attention_matrix, fdc_forward, laplacian_apply
from mma.layers import init_linear
from mma.tensor import Tensor, grad_check, mul, tsum

from oracles import fdc_loops, softmax_direct

seeds = st.integers(0, 2**31 - 1)


def params(seed, c=4, ca=3):
    return FDCParams.init(np.random.default_rng(seed), c, ca)


def lists(p):
    L = lambda t: t.data.tolist()
    return L(p.w_q.weight), L(p.w_q.bias), L(p.w_k.weight), L(p.w_k.bias), L(p.w_o.weight)


class TestAttentionMatrix:
    def test_singleton(self):
        a = fdc_attention_matrix(params(0), Tensor(np.random.default_rng(1).normal(size=(1, 4))))
        np.testing.assert_array_equal(a.data, [[1.0]])

    def test_zero_disparity_zero_bias_is_uniform(self):
        p = params(2)
        p.w_q.bias.data[:] = 0
        p.w_k.bias.data[:] = 0
        a = fdc_attention_matrix(p, Tensor(np.zeros((5, 4))))
        np.testing.assert_array_equal(a.data, np.full((5, 5), 0.2))

    def test_direct_softmax_oracle(self):
        p = params(3)
        d = np.random.default_rng(4).normal(size=(3, 4))
        q = d @ p.w_q.weight.data + p.w_q.bias.data
        k = d @ p.w_k.weight.data + p.w_k.bias.data
        ref = np.array([softmax_direct([float(q[i] @ k[j]) / np.sqrt(3) for j in range(3)]) for i in range(3)])
        np.testing.assert_allclose(fdc_attention_matrix(p, Tensor(d)).data, ref, atol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            fdc_attention_matrix(params(0), Tensor(np.zeros((0, 4))))

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.integers(1, 12))
    def test_rows_sum_to_one(self, seed, n):
        a = fdc_attention_matrix(params(seed), Tensor(np.random.default_rng(seed).normal(size=(n, 4)) * 3))
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_constant_features_are_annihilated(self, seed):
        rng = np.random.default_rng(seed)
        a = fdc_attention_matrix(params(seed), Tensor(rng.normal(size=(7, 4))))
        const = np.tile(rng.normal(size=(1, 4)), (7, 1))
        assert np.abs(laplacian_apply(a, Tensor(const)).data).max() < 1e-10


class TestForward:
    def test_zero_disparity_passes_through_bit_exact(self):
        y = np.random.default_rng(5).normal(size=(6, 4))
        assert fdc_forward(params(6), Tensor(y), Tensor(y.copy())).data.tobytes() == y.tobytes()

    def test_singleton_passes_through(self):
        rng = np.random.default_rng(7)
        y1, y2 = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        np.testing.assert_array_equal(fdc_forward(params(8), Tensor(y1), Tensor(y2)).data, y1)

    def test_loop_oracle(self):
        p = params(9, c=2, ca=2)
        rng = np.random.default_rng(10)
        y1, y2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        ref, _ = fdc_loops(*lists(p), y1.tolist(), y2.tolist())
        assert np.abs(fdc_forward(p, Tensor(y1), Tensor(y2)).data - ref).max() < 1e-12

    def test_output_projection_must_be_bias_free(self):
        rng = np.random.default_rng(0)
        p = params(0)
        with pytest.raises(ValueError):
            FDCParams(p.w_q, p.w_k, init_linear(rng, 4, 4, bias=True))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fdc_forward(params(0), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            fdc_forward(params(0), Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 5))))

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_point_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = params(seed)
        y1, y2 = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
        perm = rng.permutation(9)
        a = fdc_forward(p, Tensor(y1), Tensor(y2)).data
        b = fdc_forward(p, Tensor(y1[perm]), Tensor(y2[perm])).data
        np.testing.assert_allclose(b, a[perm], atol=1e-9)

    def test_gradient_over_inputs_and_parameters(self):
        p = params(11)
        rng = np.random.default_rng(12)
        y1, y2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        w = Tensor(rng.normal(size=(5, 4)))

        def loss(ts):
            a, b, wq, wk, wo = ts
            p.w_q.weight, p.w_k.weight, p.w_o.weight = wq, wk, wo
            return tsum(mul(fdc_forward(p, a, b), w))

        leaves = [Tensor(y1), Tensor(y2)] + [Tensor(l.weight.data.copy()) for l in (p.w_q, p.w_k, p.w_o)]
        assert grad_check(loss, leaves) < 1e-4
