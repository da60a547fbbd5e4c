import numpy as np
import pytest

from transukan import tensor as T
from transukan.tensor import (
    DimensionError,
    ContractError,
    NumericsError,
    StateError,
    Tensor,
)


def _scalar_through(f, x):
    """sum(f(x)) as a gradcheck objective."""
    return T.sum_all(f(x))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)

    def test_gradcheck_both_operands(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        rep = T.grad_check(lambda t: T.sum_all(T.matmul(t, b)), a, tol=1e-6)
        assert rep.ok, rep
        rep = T.grad_check(lambda t: T.sum_all(T.matmul(a, t)), b, tol=1e-6)
        assert rep.ok, rep

    def test_batched_broadcast(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 5, 3, 4)))
        b = Tensor(rng.normal(size=(4, 6)))
        out = T.matmul(a, b)
        assert out.shape == (2, 5, 3, 6)
        rep = T.grad_check(lambda t: T.sum_all(T.matmul(a, t)), b, tol=1e-6)
        assert rep.ok


class TestElementwise:
    def test_silu_zero(self):
        assert T.silu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_silu_one(self):
        # 1 / (1 + e^-1), evaluated directly
        expected = 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(T.silu(Tensor(np.array([1.0]))).data[0],
                                   expected, rtol=1e-12)
        np.testing.assert_allclose(T.silu(Tensor(np.array([1.0]))).data[0],
                                   0.7310585786, atol=1e-10)

    def test_relu_signs(self):
        out = T.relu(Tensor(np.array([-3.0, 3.0])))
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_broadcast_failure(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    @pytest.mark.parametrize("op", [T.relu, T.silu, T.square])
    def test_unary_gradcheck(self, op):
        rng = np.random.default_rng(11)
        x = Tensor(rng.uniform(0.1, 2.0, size=(2, 5)))  # away from relu kink
        rep = T.grad_check(lambda t: _scalar_through(op, t), x, tol=1e-6)
        assert rep.ok, rep

    def test_binary_broadcast_gradcheck(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.uniform(0.5, 2.0, size=(4,)))
        for op in (T.add, T.sub, T.mul, T.div):
            rep = T.grad_check(lambda t: T.sum_all(op(t, b)), a, tol=1e-6)
            assert rep.ok, (op.__name__, rep)
            rep = T.grad_check(lambda t: T.sum_all(op(a, t)), b, tol=1e-6)
            assert rep.ok, (op.__name__, rep)

    def test_nan_raises(self):
        with pytest.raises(NumericsError):
            T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor(np.zeros(3)), axis=-1)
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_overflow_stability(self):
        out = T.softmax(Tensor(np.array([1000.0, 1000.0])), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_direct_values(self):
        out = T.softmax(Tensor(np.array([1.0, 2.0])), axis=-1)
        np.testing.assert_allclose(out.data, [0.26894, 0.73106], atol=1e-5)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for seed in range(10):
            x = Tensor(np.random.default_rng(seed).normal(scale=5, size=(4, 7)))
            s = T.softmax(x, axis=-1)
            np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(s.data >= 0)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 5)))
        w = np.random.default_rng(9).normal(size=(3, 5))
        rep = T.grad_check(
            lambda t: T.sum_all(T.mul(T.softmax(t, axis=-1), Tensor(w))), x, tol=1e-6)
        assert rep.ok, rep


class TestLayerNorm:
    def test_constant_row(self):
        x = Tensor(np.array([[5.0, 5.0, 5.0]]))
        out = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        x = Tensor(np.array([[1.0, 3.0]]))
        out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_normalization_moments(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6, 9), scale=3.0) + 2.0)
        out = T.layer_norm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=1e-10)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-6)

    def test_gradcheck_all_inputs(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 4)))
        gamma = Tensor(rng.normal(size=(4,)) + 1.0)
        beta = Tensor(rng.normal(size=(4,)))
        w = np.random.default_rng(1).normal(size=(2, 4))
        for target in (x, gamma, beta):
            rep = T.grad_check(
                lambda t, target=target: T.sum_all(T.mul(
                    T.layer_norm(x, gamma, beta), Tensor(w))),
                target, tol=1e-5)
            assert rep.ok, rep


class TestConv2d:
    def test_1x1_identity(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_3x3_padded(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, None, padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 0, 2] == 4.0

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 2, 11, 9)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        out = T.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 3, 6, 5)

    def test_matches_naive_convolution(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros(out.shape)
        for bi in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[bi, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        expected[bi, o, i, j] = np.sum(patch * w[o]) + b[o]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=(3,)))
        for target in (x, w, b):
            rep = T.grad_check(
                lambda t: T.sum_all(T.square(T.conv2d(x, w, b, padding=1))),
                target, tol=1e-5)
            assert rep.ok, rep


class TestMeanLastAxis:
    def test_hand_value(self):
        out = T.mean_last_axis(Tensor(np.array([1.0, 2.0, 3.0, 4.0])))
        assert out.item() == 2.5

    def test_permutation_invariance(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=12)
        perm = rng.permutation(12)
        a = T.mean_last_axis(Tensor(x)).item()
        b = T.mean_last_axis(Tensor(x[perm])).item()
        np.testing.assert_allclose(a, b, rtol=1e-15)

    def test_single_element_identity(self):
        out = T.mean_last_axis(Tensor(np.array([[3.5]])))
        np.testing.assert_array_equal(out.data, [3.5])

    def test_gradient_distributes(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
        T.backward(T.mean_last_axis(x))
        np.testing.assert_allclose(x.grad, 0.25)


class TestUpsample:
    def test_single_pixel(self):
        out = T.upsample_nearest_2x(Tensor(np.array([[[[1.0]]]])))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))

    def test_block_replication(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.upsample_nearest_2x(x)
        expected = np.array([[[[1, 1, 2, 2], [1, 1, 2, 2],
                               [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=float)
        np.testing.assert_array_equal(out.data, expected)

    def test_sum_property(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)))
        out = T.upsample_nearest_2x(x)
        np.testing.assert_allclose(out.data.sum(), 4.0 * x.data.sum(), rtol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        rep = T.grad_check(lambda t: T.sum_all(T.square(T.upsample_nearest_2x(t))),
                           x, tol=1e-6)
        assert rep.ok


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.zeros((3, 4)), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_hand_derivative(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_composed_chain_matches_fd(self):
        rng = np.random.default_rng(30)
        w = Tensor(rng.normal(size=(4, 4)))
        gamma = Tensor(np.ones(4))
        beta = Tensor(np.zeros(4))
        w2 = Tensor(rng.normal(size=(2, 4)))

        def f(t):
            out = T.layer_norm(T.silu(T.matmul(t, w)), gamma, beta)
            return T.sum_all(T.mul(out, w2))

        x = Tensor(rng.normal(size=(2, 4)))
        rep = T.grad_check(f, x, tol=1e-5)
        assert rep.ok, rep

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.sum_all(x)
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)

    def test_empty_tape_rejected(self):
        with pytest.raises(StateError):
            T.backward(Tensor(np.array(1.0), requires_grad=True))

    def test_gradient_accumulation_is_additive(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.sum_all(x))
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [3.0, 5.0])
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_fanout(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.mul(x, x)
        loss = T.sum_all(T.add(y, y))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_tape_topological_order(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, x)
        tape = T.Tape(T.sum_all(z))
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if id(parent) in pos:
                    assert pos[id(parent)] < pos[id(node)]


class TestGradCheckHarness:
    def test_linear_function_exact(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3)))
        rep = T.grad_check(T.sum_all, x, tol=1e-10)
        assert rep.ok and rep.max_rel_err < 1e-10

    def test_silu_sum(self):
        x = Tensor(np.random.default_rng(2).normal(size=7))
        rep = T.grad_check(lambda t: T.sum_all(T.silu(t)), x, h=1e-5, tol=1e-6)
        assert rep.ok

    def test_injected_fault_detected(self):
        # negative control: op with a deliberately wrong adjoint must fail
        def broken_square(x):
            return T._node(x.data * x.data, "broken", (x,),
                           lambda g: (g * 3.0 * x.data,))

        x = Tensor(np.random.default_rng(3).uniform(1.0, 2.0, size=4))
        rep = T.grad_check(lambda t: T.sum_all(broken_square(t)), x, tol=1e-6)
        assert not rep.ok

    def test_coordinate_sampling(self):
        x = Tensor(np.random.default_rng(4).normal(size=100))
        rep = T.grad_check(lambda t: T.sum_all(T.square(t)), x, sample=10,
                           rng=np.random.default_rng(0), tol=1e-6)
        assert rep.ok and rep.n_checked == 10

    def test_nonfinite_objective_raises(self):
        def f(t):
            out = T.sum_all(t)
            out.data = np.array(np.inf)
            return out

        x = Tensor(np.ones(2))
        with pytest.raises(NumericsError):
            T.grad_check(f, x)


class TestDeterminism:
    def test_forward_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(4, 6)))
            w = Tensor(rng.normal(size=(6, 6)))
            return T.layer_norm(T.silu(T.matmul(x, w)),
                                Tensor(np.ones(6)), Tensor(np.zeros(6))).data

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_invariant_product_shape_equals_size(self):
        t = Tensor(np.zeros((3, 4, 5)))
        assert int(np.prod(t.shape)) == t.size


class TestShapeOps:
    def test_concat_and_split_grads(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        out = T.concat([a, b], axis=1)
        assert out.shape == (2, 5)
        T.backward(T.sum_all(T.mul(out, out)))
        np.testing.assert_allclose(a.grad, 2.0)
        np.testing.assert_allclose(b.grad, 2.0)

    def test_transpose_reshape_roundtrip_grad(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        rep = T.grad_check(
            lambda t: T.sum_all(T.square(T.reshape(T.transpose(t, (1, 0, 2)), (3, 8)))),
            x, tol=1e-6)
        assert rep.ok

    def test_slice_axis_grad(self):
        x = Tensor(np.arange(10.0), requires_grad=True)
        T.backward(T.sum_all(T.slice_axis(x, 0, 2, 5)))
        expected = np.zeros(10)
        expected[2:5] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_sum_axes(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        out = T.sum_axes(x, (0, 2))
        np.testing.assert_allclose(out.data, x.data.sum(axis=(0, 2)), rtol=1e-15)
        rep = T.grad_check(lambda t: T.sum_all(T.square(T.sum_axes(t, (0, 2)))),
                           x, tol=1e-6)
        assert rep.ok
