import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from insmos import tensor as T
from insmos.gradsuite import OP_TOL, op_cases
from insmos.tensor import Parameter, Tensor

finite = st.floats(-10, 10, allow_nan=False, width=64)


class TestElementwise:
    def test_add_zero_is_identity(self, rng):
        x = rng.normal(size=(3, 4))
        assert_array_equal(T.add(Tensor(x), 0.0).data, x)

    def test_sum_of_ones(self):
        assert T.sum(Tensor(np.ones((2, 2)))).item() == 4.0

    def test_broadcast_gradient_reduces_to_operand_shape(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        T.backward(T.sum(a * b))
        assert b.grad.shape == (4,)
        assert_allclose(b.grad, a.data.sum(axis=0))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_log_domain_checked(self):
        with pytest.raises(ValueError, match="strictly positive"):
            T.log(Tensor(np.array([0.0, 1.0])))

    def test_overflow_raises(self):
        with pytest.raises(FloatingPointError):
            T.exp(Tensor(np.array([1000.0])))

    def test_clamp_blocks_gradient_outside(self):
        x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
        T.backward(T.sum(T.clamp(x, -1, 1)))
        assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
    def test_add_commutes(self, a, b):
        assert_array_equal(T.add(a, b).data, T.add(b, a).data)


class TestReductionsAndShapes:
    def test_mean_gradient(self, rng):
        x = rng.normal(size=7)
        xt = Tensor(x, requires_grad=True)
        T.backward(T.mean(xt))
        assert_allclose(xt.grad, np.full(7, 1 / 7))
        assert T.grad_check(lambda v: T.mean(v), x) <= 1e-9

    def test_max_routes_to_first_tie(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        T.backward(T.sum(T.max(x, axis=1)))
        assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_l2norm_zero_subgradient(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        T.backward(T.l2norm(x, axis=0))
        assert_array_equal(x.grad, np.zeros(3))

    def test_index_select_repeated_indices_accumulate(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        T.backward(T.sum(x[np.array([0, 0, 2])]))
        assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_concat_stack_shapes(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        assert T.concat([a, b], axis=1).shape == (2, 6)
        assert T.stack([a, b], axis=1).shape == (2, 2, 3)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 3))
        assert_array_equal(T.matmul(np.eye(3), x).data, x)

    def test_hand_product(self):
        assert_array_equal(T.matmul([[1.0, 2], [3, 4]], [[1.0], [1]]).data, [[3], [7]])

    def test_gradcheck(self, rng):
        b = rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        assert T.grad_check(lambda a: T.sum(T.matmul(a, b) * w), rng.normal(size=(3, 4))) <= 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        assert_allclose(T.softmax(np.zeros(4)).data, 0.25)

    def test_two_zero_logits(self):
        assert_allclose(T.softmax(np.zeros(2)).data, [0.5, 0.5])

    def test_log_ratio(self):
        assert_allclose(T.softmax(np.log([1.0, 3.0])).data, [0.25, 0.75], rtol=1e-12)

    def test_composed_with_matmul(self, rng):
        b = rng.normal(size=(4, 3))
        w = rng.normal(size=(2, 3))
        err = T.grad_check(lambda a: T.sum(T.softmax(T.matmul(a, b)) * w), rng.normal(size=(2, 4)), h=1e-5)
        assert err <= 1e-6

    @given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        assert_allclose(T.softmax(x).data.sum(axis=-1), 1.0, rtol=1e-12)


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 5, 6))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        assert_allclose(T.conv2d(x, w).data, x)

    def test_ones_center(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3))).data
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == 4.0

    def test_stride_two_shape(self, rng):
        assert T.conv2d(rng.normal(size=(1, 3, 48, 48)), rng.normal(size=(4, 3, 3, 3)), stride=2).shape == (
            1, 4, 24, 24)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 3, 2))
        for o in range(3):
            for i in range(3):
                for j in range(2):
                    ref[o, i, j] = (xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        assert_allclose(T.conv2d(x, w, b, stride=2).data, ref, rtol=1e-12)

    def test_gradcheck(self, rng):
        x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        r = rng.normal(size=(3, 5, 5))
        assert T.grad_check(lambda v: T.sum(T.conv2d(v, w) * r), x) <= 1e-7
        assert T.grad_check(lambda v: T.sum(T.conv2d(x, v) * r), w) <= 1e-7


class TestResampling:
    def test_identity_grid(self, rng):
        img = rng.normal(size=(1, 4, 5))
        ys, xs = np.mgrid[0:4, 0:5].astype(float)
        assert_allclose(T.bilinear_sample(img, np.stack([xs, ys])).data, img)

    def test_integer_shift_clamps_border(self):
        img = np.tile(np.arange(5.0), (3, 1))[None]
        ys, xs = np.mgrid[0:3, 0:5].astype(float)
        out = T.bilinear_sample(img, np.stack([xs + 1, ys])).data[0]
        assert_array_equal(out[:, :4], img[0, :, 1:])
        assert_array_equal(out[:, 4], 4.0)

    def test_midpoint(self):
        img = np.array([[[0.0, 1.0]]])
        assert T.bilinear_sample(img, np.array([[[0.5]], [[0.0]]])).data[0, 0, 0] == 0.5

    def test_upsample_identity_and_constant(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert_allclose(T.upsample_bilinear(x, 3, 4).data, x)
        assert_allclose(T.upsample_bilinear(np.full((1, 2, 3), 7.0), 5, 9).data, 7.0)

    def test_upsample_align_corners_false(self):
        assert_allclose(T.upsample_bilinear(np.array([[[0.0, 1.0]]]), 1, 4).data[0, 0], [0, 0.25, 0.75, 1])

    def test_upsample_rejects_shrink(self):
        with pytest.raises(ValueError):
            T.upsample_bilinear(np.ones((1, 4, 4)), 2, 2)


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        T.backward(T.sum(x))
        assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.sum(x * x))
        assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)

    def test_leaf_gradients_accumulate(self):
        p = Parameter(np.array([1.0]), "p")
        T.backward(T.sum(p * 3.0))
        T.backward(T.sum(p * 3.0))
        assert_array_equal(p.grad, [6.0])

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(T.sum(y))
        assert_array_equal(x.grad, [1.0])


@pytest.mark.parametrize("name,fn,inputs", op_cases(np.random.default_rng(7)), ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradcheck(name, fn, inputs):
    for i in range(len(inputs)):
        def f(x, i=i):
            return fn(*[x if j == i else Tensor(a) for j, a in enumerate(inputs)])

        assert T.grad_check(f, inputs[i]) <= OP_TOL, name


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 5))
def test_matmul_gradcheck_random_shapes(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    b, w = rng.normal(size=(k, n)), rng.normal(size=(m, n))
    assert T.grad_check(lambda a: T.sum(T.matmul(a, b) * w), rng.normal(size=(m, k))) <= OP_TOL
