import numpy as np
import pytest

from vtryon import numcore as nc
from vtryon.numcore import (
    ContractError,
    EvaluationError,
    ShapeError,
    Tensor,
    backward,
    grad,
    gradcheck,
)


def test_tensor_basics():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.ndim == 2
    assert t.size == 4
    assert t.data.dtype == np.float64


def test_item_requires_scalar():
    assert Tensor(3.0).item() == 3.0
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_add_matches_numpy():
    a, b = np.arange(6.0).reshape(2, 3), np.ones((2, 3))
    np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_both_orders():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    s = Tensor(3.0, requires_grad=True)
    out = nc.reduce_sum(a * s + s)
    backward(out)
    np.testing.assert_allclose(a.grad, 3.0 * np.ones((2, 2)))
    np.testing.assert_allclose(s.grad, np.array(4.0 + 4.0))


def test_python_scalar_operands():
    a = Tensor([1.0, 2.0])
    np.testing.assert_array_equal((2.0 * a).data, [2.0, 4.0])
    np.testing.assert_array_equal((a - 1.0).data, [0.0, 1.0])
    np.testing.assert_array_equal((1.0 - a).data, [0.0, -1.0])
    np.testing.assert_array_equal((a / 2.0).data, [0.5, 1.0])


def test_backward_requires_scalar_root():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(a + 1.0)


def test_backward_diamond_graph_accumulates():
    # y = x*x + x*x: gradient must be 4x, not 2x
    x = Tensor(np.array([3.0]), requires_grad=True)
    p = x * x
    y = nc.reduce_sum(p + p)
    backward(y)
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_returns_leaf_map():
    x = Tensor(np.array([2.0]), requires_grad=True)
    leaves = backward(nc.reduce_sum(x * 3.0))
    assert x in leaves
    np.testing.assert_allclose(leaves[x].data, [3.0])


def test_grad_of_unreachable_is_zero():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    g = grad(nc.reduce_sum(x * 2.0), y)
    np.testing.assert_array_equal(g, np.zeros(2))


def test_softmax_rows_sum_to_one():
    out = nc.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 7))))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-12)
    assert (out.data >= 0).all()


def test_softmax_shift_invariance():
    x = np.random.default_rng(1).normal(size=(3, 5))
    a = nc.softmax(Tensor(x)).data
    b = nc.softmax(Tensor(x + 1000.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_take_gradient_scatter_adds():
    x = Tensor(np.arange(4.0), requires_grad=True)
    idx = np.array([0, 0, 2])
    backward(nc.reduce_sum(x[idx]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_concat_and_pad_roundtrip_grads():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 2)), requires_grad=True)
    y = nc.pad(nc.concat([a, b], axis=0), ((1, 0), (0, 1)))
    backward(nc.reduce_sum(y * y))
    np.testing.assert_allclose(a.grad, 2.0 * np.ones((2, 2)))
    np.testing.assert_allclose(b.grad, 2.0 * np.ones((1, 2)))


def test_reduce_mean_axis():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_allclose(nc.reduce_mean(Tensor(x), axis=0).data, x.mean(0))
    np.testing.assert_allclose(
        nc.reduce_mean(Tensor(x), axis=1, keepdims=True).data,
        x.mean(1, keepdims=True),
    )


def test_transpose_default_reverses_axes():
    x = np.arange(24.0).reshape(2, 3, 4)
    assert nc.transpose(Tensor(x)).shape == (4, 3, 2)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: nc.reduce_sum(nc.exp(x)),
        lambda x: nc.reduce_sum(nc.log(x + 2.0)),
        lambda x: nc.reduce_sum(nc.sigmoid(x)),
        lambda x: nc.reduce_sum(nc.sqrt(x + 2.0)),
        lambda x: nc.reduce_sum(nc.power(x + 2.0, 1.3)),
        lambda x: nc.reduce_sum(nc.relu(x + 0.05)),
        lambda x: nc.reduce_sum(nc.absolute(x + 0.05)),
        lambda x: nc.reduce_sum(nc.softmax(x, axis=-1) * nc.exp(x)),
        lambda x: nc.reduce_mean(x * x, axis=1).sum(),
        lambda x: nc.reduce_sum(x / (x + 3.0)),
    ],
)
def test_per_op_gradcheck(fn):
    x = np.random.default_rng(3).uniform(0.2, 1.0, size=(3, 4))
    assert gradcheck(fn, Tensor(x)) <= 1e-4


def test_matmul_gradcheck():
    b = Tensor(np.random.default_rng(4).normal(size=(4, 2)))

    def f(a):
        return nc.reduce_sum(nc.matmul(a, b) * 0.5)

    x = np.random.default_rng(5).normal(size=(3, 4))
    assert gradcheck(f, Tensor(x)) <= 1e-4


def test_division_by_tensor_gradcheck():
    b = Tensor(np.random.default_rng(6).uniform(1.0, 2.0, size=(3, 3)))

    def f(a):
        return nc.reduce_sum(a / b) + nc.reduce_sum(2.0 / (a + 3.0))

    x = np.random.default_rng(7).uniform(0.5, 1.5, size=(3, 3))
    assert gradcheck(f, Tensor(x)) <= 1e-4


def test_gradcheck_rejects_nonscalar():
    with pytest.raises(ContractError):
        gradcheck(lambda x: x * 2.0, Tensor(np.ones(2)))


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_gradcheck_flags_nonfinite():
    with pytest.raises(EvaluationError):
        gradcheck(lambda x: nc.reduce_sum(nc.log(x)), Tensor(np.array([-1.0])))


def test_custom_op_participates_in_tape():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    doubled = nc.custom_op(2.0 * x.data, (x,), lambda g: (2.0 * g,))
    backward(nc.reduce_sum(doubled))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_detach_stops_gradient():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = nc.reduce_sum(x.detach() * x)
    backward(y)
    np.testing.assert_allclose(x.grad, [1.0])
