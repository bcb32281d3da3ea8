import math

import numpy as np
import numpy.testing as npt
import pytest

from survfusion.errors import NumericError, ShapeError
from survfusion.tensor import (
    FlopCounter,
    Tensor,
    backward,
    check_gradients,
    concat,
    exp,
    layer_norm,
    log,
    matmul,
    relu,
    reshape,
    softmax_rows,
    tensor_mean,
    tensor_sum,
    transpose,
    zero_grad,
)


def matmul_oracle(a, b):
    """Naive triple-loop matrix product, independent of numpy's dot."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def layer_norm_oracle(x, gain, bias, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return np.array([(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(x, gain, bias)])


class TestMatmul:
    def test_identity(self):
        m = Tensor([[2.0, -1.0], [0.5, 3.0]])
        eye = Tensor(np.eye(2))
        npt.assert_array_equal(matmul(eye, m).data, m.data)

    def test_row_sums(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        ones = Tensor([[1.0], [1.0]])
        npt.assert_array_equal(matmul(a, ones).data, [[3.0], [7.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        npt.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-12)

    def test_random_shapes_vs_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            m, k, n = rng.integers(1, 17, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, n))
            npt.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_flop_counter(self):
        a, b = Tensor(np.ones((3, 5))), Tensor(np.ones((5, 7)))
        with FlopCounter() as c:
            matmul(a, b)
        assert c.total == 2 * 3 * 5 * 7


class TestSoftmaxRows:
    def test_uniform_input(self):
        out = softmax_rows(Tensor([[4.2, 4.2, 4.2]]))
        npt.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)

    def test_closed_form(self):
        out = softmax_rows(Tensor([[0.0, math.log(2.0)]]))
        npt.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        npt.assert_allclose(softmax_rows(Tensor(x + 5.0)).data, softmax_rows(Tensor(x)).data, atol=1e-12)

    def test_rows_sum_to_one_and_open_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.standard_normal((5, 8)) * 10
            s = softmax_rows(Tensor(x)).data
            npt.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(s > 0) and np.all(s <= 1)

    def test_large_values_stable(self):
        s = softmax_rows(Tensor([[1000.0, 1000.0]]))
        npt.assert_allclose(s.data, [[0.5, 0.5]], atol=1e-12)


class TestLayerNorm:
    def test_fixed_point(self):
        # already zero-mean unit-variance (population variance)
        x = np.array([1.0, -1.0, 1.0, -1.0])
        gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
        out = layer_norm(Tensor(x[None, :]), gain, bias)
        npt.assert_allclose(out.data, x[None, :], atol=1e-5)

    def test_constant_vector_collapses(self):
        out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(8)
        gain = rng.standard_normal(8)
        bias = rng.standard_normal(8)
        out = layer_norm(Tensor(x[None, :]), Tensor(gain), Tensor(bias))
        npt.assert_allclose(out.data[0], layer_norm_oracle(x, gain, bias), atol=1e-12)

    def test_normalized_stats(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((6, 16)) * 4 + 2
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        npt.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(tensor_sum(x))
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(-2.0, requires_grad=True)
        backward(x * y)
        assert x.grad == pytest.approx(-2.0)
        assert y.grad == pytest.approx(3.0)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(4), requires_grad=True)
        backward(tensor_sum(x))
        backward(tensor_sum(x * 2.0))
        npt.assert_array_equal(x.grad, 3.0 * np.ones(4))
        zero_grad([x])
        assert x.grad is None

    def test_grad_shapes_match_leaves(self):
        rng = np.random.default_rng(21)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        c = Tensor(rng.standard_normal(2), requires_grad=True)
        out = tensor_sum(softmax_rows(matmul(a, b)) + c)
        grads = backward(out)
        for leaf in (a, b, c):
            assert grads[leaf].shape == leaf.shape
            assert leaf.grad.shape == leaf.shape

    def test_composite_softmax_matmul_finite_differences(self):
        rng = np.random.default_rng(17)
        b = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 5))

        def f(x):
            return tensor_sum(softmax_rows(matmul(x, Tensor(w))) * Tensor(b[:, :5] if w.shape[1] == 5 else b))

        proj = rng.standard_normal((4, 5))

        def g(x):
            return tensor_sum(softmax_rows(matmul(x, Tensor(w))) * Tensor(proj))

        err = check_gradients(g, Tensor(rng.standard_normal((4, 3))), h=1e-5)
        assert err < 1e-6


class TestCheckGradients:
    def test_quadratic_is_nearly_exact(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal(7))
        err = check_gradients(lambda t: tensor_sum(t * t) * 0.5, x, h=1e-5)
        assert err < 1e-9

    def test_subsampled_coordinates(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((10, 10)))
        err = check_gradients(lambda t: tensor_sum(exp(t * 0.1)), x, h=1e-5,
                              max_coords=20, rng=np.random.default_rng(0))
        assert err < 1e-8


def _random_op_cases():
    """(name, builder) pairs; builder(rng) returns (f, x) for check_gradients."""

    def mk_matmul(rng):
        w = Tensor(rng.standard_normal((5, 4)))
        c = Tensor(rng.standard_normal((3, 4)))
        return lambda x: tensor_sum(matmul(x, w) * c), Tensor(rng.standard_normal((3, 5)))

    def mk_softmax(rng):
        c = Tensor(rng.standard_normal((4, 6)))
        return lambda x: tensor_sum(softmax_rows(x) * c), Tensor(rng.standard_normal((4, 6)))

    def mk_layer_norm(rng):
        g = Tensor(rng.standard_normal(8))
        b = Tensor(rng.standard_normal(8))
        c = Tensor(rng.standard_normal((3, 8)))
        return lambda x: tensor_sum(layer_norm(x, g, b) * c), Tensor(rng.standard_normal((3, 8)))

    def mk_relu(rng):
        c = Tensor(rng.standard_normal((4, 5)))
        return lambda x: tensor_sum(relu(x) * c), Tensor(rng.standard_normal((4, 5)) + 0.05)

    def mk_exp(rng):
        return lambda x: tensor_sum(exp(x)), Tensor(rng.standard_normal(6))

    def mk_log(rng):
        return lambda x: tensor_sum(log(x)), Tensor(rng.uniform(0.5, 2.0, size=6))

    def mk_div(rng):
        d = Tensor(rng.uniform(1.0, 2.0, size=(3, 4)))
        return lambda x: tensor_sum(x / d), Tensor(rng.standard_normal((3, 4)))

    def mk_concat_slice(rng):
        other = Tensor(rng.standard_normal((2, 4)))
        c = Tensor(rng.standard_normal((5, 2)))
        return (
            lambda x: tensor_sum(concat([x, other], axis=0)[:, 1:3] * c),
            Tensor(rng.standard_normal((3, 4))),
        )

    def mk_mean_reshape(rng):
        return (
            lambda x: tensor_mean(reshape(x, (2, 6)) ** 2),
            Tensor(rng.standard_normal((3, 4))),
        )

    def mk_transpose(rng):
        c = Tensor(rng.standard_normal((4, 3)))
        return lambda x: tensor_sum(transpose(x) * c), Tensor(rng.standard_normal((3, 4)))

    return [
        ("matmul", mk_matmul),
        ("softmax_rows", mk_softmax),
        ("layer_norm", mk_layer_norm),
        ("relu", mk_relu),
        ("exp", mk_exp),
        ("log", mk_log),
        ("div", mk_div),
        ("concat_slice", mk_concat_slice),
        ("mean_reshape", mk_mean_reshape),
        ("transpose", mk_transpose),
    ]


@pytest.mark.parametrize("name,builder", _random_op_cases())
def test_every_op_gradient_matches_finite_differences(name, builder):
    # 20 random inputs per op, rel. err < 1e-4 at 64-bit
    for trial in range(20):
        rng = np.random.default_rng(hash(name) % (2**32) + trial)
        f, x = builder(rng)
        assert check_gradients(f, x, h=1e-5) < 1e-4, f"{name} trial {trial}"


class TestNumericGuards:
    def test_overflow_names_op(self):
        with pytest.raises(NumericError, match="exp"):
            exp(Tensor([1000.0]))

    def test_log_zero_raises(self):
        with pytest.raises(NumericError, match="log"):
            log(Tensor([0.0]))

    def test_nan_input_rejected_at_creation(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
            out = tensor_sum(softmax_rows(matmul(x, w)) * relu(x @ w))
            backward(out)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        a = run()
        b = run()
        for u, v in zip(a, b):
            npt.assert_array_equal(u, v)
