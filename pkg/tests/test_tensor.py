import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppflow import tensor as T
from ppflow.tensor import ContractError, DimensionError, Graph, Tensor, grad_check, no_grad


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_scalar(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_grad(self, rng):
        b = rng.standard_normal((4, 3))
        err = grad_check(lambda x: T.sum(T.mul(T.matmul(x, Tensor(b)), T.matmul(x, Tensor(b)))), rng.standard_normal((2, 5, 4)))
        assert err < 1e-6


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(Tensor(np.full((2, 8), 3.5)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.standard_normal(6)
        out = T.layer_norm(Tensor(rng.standard_normal((3, 6))), Tensor(np.zeros(6)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 6)))

    def test_statistics(self, rng):
        out = T.layer_norm(Tensor(rng.standard_normal((4, 512)) * 3 + 2), eps=1e-14).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(5)), Tensor(np.zeros(5)))

    def test_grad(self, rng):
        g, b, w = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal((3, 6))
        f = lambda x: T.sum(T.mul(T.layer_norm(x, Tensor(g), Tensor(b)), Tensor(w)))
        assert grad_check(f, rng.standard_normal((3, 6))) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out)) and out[0] > 1 - 1e-12 and out[1] < 1e-12

    def test_formula_oracle(self, rng):
        x = rng.standard_normal((4, 9))
        ref = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, ref, rtol=0, atol=1e-12)

    def test_mask_zeroes_disallowed(self, rng):
        mask = np.array([[True, False, True], [False, True, False], [True, True, True]])
        out = T.softmax(Tensor(rng.standard_normal((3, 3))), mask).data
        assert np.all(out[~mask] == 0)
        np.testing.assert_allclose(out.sum(-1), 1.0)

    def test_grad(self, rng):
        w = rng.standard_normal((2, 5))
        assert grad_check(lambda x: T.sum(T.mul(T.softmax(x), Tensor(w))), rng.standard_normal((2, 5))) < 1e-6


class TestGradCheck:
    def test_quadratic(self, rng):
        x = rng.standard_normal(7)
        t = Tensor(x, requires_grad=True)
        T.sum(T.mul(t, t)).backward()
        np.testing.assert_allclose(t.grad, 2 * x, rtol=1e-12)
        assert grad_check(lambda v: T.sum(T.mul(v, v)), x) < 1e-8

    def test_constant(self, rng):
        assert grad_check(lambda v: Tensor(3.0), rng.standard_normal(4)) == 0.0

    def test_non_scalar(self, rng):
        with pytest.raises(ContractError):
            grad_check(lambda v: T.mul(v, 2.0), rng.standard_normal(4))

    @pytest.mark.parametrize("op", ["gelu", "silu"])
    def test_activations(self, op, rng):
        fn = getattr(T, op)
        w = rng.standard_normal(10)
        assert grad_check(lambda v: T.sum(T.mul(fn(v), Tensor(w))), rng.standard_normal(10)) < 1e-6


class TestStructuralOps:
    def test_take_duplicate_indices_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        T.sum(T.take(x, np.array([0, 2, 0, 0]))).backward()
        np.testing.assert_array_equal(x.grad, [[3, 3], [0, 0], [1, 1]])

    def test_concat_slice_permute_reshape_grads(self, rng):
        w = rng.standard_normal((4, 3, 2))

        def f(x):
            y = T.concat([x, T.mul(x, 2.0)], axis=0)
            y = T.permute(T.reshape(y, (4, 2, 3)), (0, 2, 1))
            return T.sum(T.mul(T.slice_last(T.concat([y, y], axis=-1), 1, 3), Tensor(w)))

        assert grad_check(f, rng.standard_normal((2, 2, 3))) < 1e-6

    def test_broadcast_add_grad(self, rng):
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        T.sum(T.add(Tensor(rng.standard_normal((4, 3))), b)).backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = T.mul(x, 2.0)
            assert not T.is_grad_enabled()
        assert not y.requires_grad and T.is_grad_enabled()

    def test_graph_topological_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, x)
        out = T.sum(z)
        nodes = Graph.from_output(out).nodes
        pos = {id(n): i for i, n in enumerate(nodes)}
        assert pos[id(x)] < pos[id(y)] < pos[id(z)] < pos[id(out)]

    def test_diamond_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        T.sum(T.add(T.mul(x, 3.0), T.mul(x, 4.0))).backward()
        assert x.grad.tolist() == [7.0]

    def test_deep_chain_no_recursion_error(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.add(y, 1.0)
        T.sum(y).backward()
        assert x.grad.tolist() == [1.0]


@settings(max_examples=25, deadline=None)
@given(
    m=st.integers(1, 5), k=st.integers(1, 5), n=st.integers(1, 5), seed=st.integers(0, 2**16)
)
def test_linear_matches_dense_formula(m, k, n, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((m, k)), r.standard_normal((n, k)), r.standard_normal(n)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, naive_matmul(x, w.T) + b, atol=1e-12)
