"""Graph engine primitives against central-difference oracles.

Every primitive is checked by pushing a random cotangent through a scalar
head ``sum(op(x) * w)`` and comparing against numeric differentiation of the
same scalar. Double-backprop correctness gets its own closed-form cases.
"""

import numpy as np
import pytest

from prefcurate import engine
from prefcurate.engine import Tensor, grad, no_grad

from toys import numeric_grad

RNG = np.random.default_rng(20240811)


def check_unary(op, x, *, positive=False, tol=1e-6):
    x = np.abs(x) + 0.5 if positive else x
    w = RNG.standard_normal(op(Tensor(x)).shape)

    def scalar(flat):
        value = op(Tensor(flat.reshape(x.shape)))
        return float(np.sum(value.data * w))

    leaf = Tensor(x, requires_grad=True)
    head = engine.tensor_sum(engine.mul(op(leaf), Tensor(w)))
    (g,) = grad(head, [leaf])
    expected = numeric_grad(scalar, x.ravel()).reshape(x.shape)
    assert np.allclose(g.data, expected, rtol=tol, atol=tol)


def check_binary(op, x, y, tol=1e-6):
    w = RNG.standard_normal(op(Tensor(x), Tensor(y)).shape)

    def scalar(x_flat, y_flat):
        value = op(Tensor(x_flat.reshape(x.shape)), Tensor(y_flat.reshape(y.shape)))
        return float(np.sum(value.data * w))

    a = Tensor(x, requires_grad=True)
    b = Tensor(y, requires_grad=True)
    head = engine.tensor_sum(engine.mul(op(a, b), Tensor(w)))
    ga, gb = grad(head, [a, b])
    expected_a = numeric_grad(lambda f: scalar(f, y.ravel()), x.ravel()).reshape(x.shape)
    expected_b = numeric_grad(lambda f: scalar(x.ravel(), f), y.ravel()).reshape(y.shape)
    assert np.allclose(ga.data, expected_a, rtol=tol, atol=tol)
    assert np.allclose(gb.data, expected_b, rtol=tol, atol=tol)


def test_add_sub_mul_div_same_shape():
    x = RNG.standard_normal((3, 4))
    y = RNG.standard_normal((3, 4)) + 3.0
    check_binary(engine.add, x, y)
    check_binary(engine.sub, x, y)
    check_binary(engine.mul, x, y)
    check_binary(engine.div, x, y)


def test_broadcasting_binary_ops():
    x = RNG.standard_normal((3, 1))
    y = RNG.standard_normal((4,)) + 2.5
    check_binary(engine.add, x, y)
    check_binary(engine.mul, x, y)
    check_binary(engine.div, x, y)
    check_binary(engine.sub, RNG.standard_normal(()), y)


def test_scalar_lifting_and_dunders():
    x = Tensor([1.0, 2.0], requires_grad=True)
    head = ((2.0 * x + 1.0) / 4.0 - 0.5).sum()
    (g,) = grad(head, [x])
    assert np.allclose(g.data, [0.5, 0.5])
    y = (-x) ** 2.0
    assert np.allclose(y.data, [1.0, 4.0])


def test_unary_elementwise():
    x = RNG.standard_normal((2, 5))
    check_unary(engine.exp, x)
    check_unary(engine.tanh, x)
    check_unary(engine.sigmoid, 3.0 * x)
    check_unary(engine.softplus, 3.0 * x)
    check_unary(engine.neg, x)
    check_unary(engine.log, x, positive=True)
    check_unary(engine.sqrt, x, positive=True)
    check_unary(lambda t: engine.power(t, 3.0), x)


def test_sigmoid_and_softplus_extreme_inputs_stay_finite():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]), requires_grad=True)
    s = engine.sigmoid(x)
    sp = engine.softplus(x)
    assert np.all(np.isfinite(s.data))
    assert np.all(np.isfinite(sp.data))
    assert s.data[0] == 0.0 and s.data[-1] == 1.0
    # softplus(x) -> x for large x, -> 0 for very negative x
    assert sp.data[0] == 0.0
    assert np.isclose(sp.data[-1], 800.0)
    (g,) = grad(sp.sum(), [x])
    assert np.all(np.isfinite(g.data))


def test_softplus_known_values():
    x = Tensor([0.0, -1.0])
    out = engine.softplus(x)
    assert np.isclose(out.data[0], np.log(2.0), atol=1e-15)
    assert np.isclose(out.data[1], 0.31326168751822286, atol=1e-15)


def test_matmul_2d_and_batched():
    check_binary(engine.matmul, RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2)))
    # batched left operand against a shared 2-d right operand
    check_binary(
        engine.matmul, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 5))
    )
    check_binary(
        engine.matmul, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((2, 4, 5))
    )


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        engine.matmul(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))


def test_matvec_and_dot():
    m = RNG.standard_normal((3, 4))
    v = RNG.standard_normal(4)
    out = engine.matvec(Tensor(m), Tensor(v))
    assert np.allclose(out.data, m @ v)
    check_binary(engine.matvec, m, v)
    check_binary(engine.dot, RNG.standard_normal(5), RNG.standard_normal(5))
    with pytest.raises(ValueError):
        engine.dot(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_reductions_and_shape_ops():
    x = RNG.standard_normal((2, 3, 4))
    check_unary(lambda t: engine.tensor_sum(t), x)
    check_unary(lambda t: engine.tensor_sum(t, axis=1), x)
    check_unary(lambda t: engine.tensor_sum(t, axis=(0, 2), keepdims=True), x)
    check_unary(lambda t: engine.mean(t, axis=-1), x)
    check_unary(lambda t: engine.mean(t), x)
    check_unary(lambda t: engine.reshape(t, (6, 4)), x)
    check_unary(lambda t: engine.swapaxes(t, 0, 2), x)
    check_unary(lambda t: engine.broadcast_to(t, (5, 2, 3, 4)), x)


def test_softmax_rows_sum_to_one_and_gradcheck():
    x = RNG.standard_normal((3, 5))
    out = engine.softmax(Tensor(x), axis=-1)
    assert np.allclose(out.data.sum(axis=-1), 1.0)
    check_unary(lambda t: engine.softmax(t, axis=-1), x)


def test_shared_subexpression_accumulates_both_paths():
    x = Tensor([1.5, -0.5], requires_grad=True)
    y = engine.mul(x, x)
    head = engine.tensor_sum(engine.add(y, y))
    (g,) = grad(head, [x])
    assert np.allclose(g.data, 4.0 * x.data)


def test_grad_requires_scalar_output():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad(engine.mul(x, 2.0), [x])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[3.0]], requires_grad=True)
    head = engine.tensor_sum(x)
    gx, gu = grad(head, [x, unused])
    assert np.allclose(gx.data, 1.0)
    assert gu.data.shape == (1, 1) and np.all(gu.data == 0.0)


def test_constant_output_yields_zero_gradients():
    x = Tensor([1.0], requires_grad=True)
    head = engine.tensor_sum(Tensor([5.0]))
    (g,) = grad(head, [x])
    assert np.all(g.data == 0.0)


def test_no_grad_suppresses_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = engine.mul(x, x)
        leaf = Tensor([3.0], requires_grad=True)
    assert not y.requires_grad and y._parents == ()
    assert not leaf.requires_grad
    z = engine.mul(x, x)
    assert z.requires_grad


def test_grad_of_grad_exponential():
    # d^2/dx^2 exp(2x) = 4 exp(2x)
    x = Tensor([0.3], requires_grad=True)
    y = engine.tensor_sum(engine.exp(engine.mul(x, 2.0)))
    (g,) = grad(y, [x], create_graph=True)
    (gg,) = grad(engine.tensor_sum(g), [x])
    assert np.allclose(gg.data, 4.0 * np.exp(0.6), rtol=1e-12)


def test_grad_of_grad_matches_numeric_hessian_diagonal():
    x0 = RNG.standard_normal(4)

    def build(leaf):
        return engine.tensor_sum(
            engine.mul(engine.tanh(leaf), engine.sigmoid(engine.mul(leaf, 0.5)))
        )

    leaf = Tensor(x0, requires_grad=True)
    (g,) = grad(build(leaf), [leaf], create_graph=True)
    # extract full Hessian rows by differentiating each gradient component
    hess = np.stack(
        [grad(engine.tensor_sum(engine.mul(g, Tensor(e))), [leaf])[0].data
         for e in np.eye(4)]
    )

    def numeric_g(flat):
        inner = Tensor(flat, requires_grad=True)
        (gi,) = grad(build(inner), [inner])
        return gi.data

    h = 1e-5
    numeric_hess = np.stack(
        [(numeric_g(x0 + h * e) - numeric_g(x0 - h * e)) / (2 * h) for e in np.eye(4)]
    ).T
    assert np.allclose(hess, numeric_hess, atol=1e-7)
    assert np.allclose(hess, hess.T, atol=1e-12)


def test_grad_without_create_graph_detaches():
    x = Tensor([1.0], requires_grad=True)
    y = engine.tensor_sum(engine.exp(x))
    (g,) = grad(y, [x])
    assert not g.requires_grad and g._parents == ()


def test_create_graph_inside_no_grad_still_builds():
    x = Tensor([0.7], requires_grad=True)
    y = engine.tensor_sum(engine.mul(engine.mul(x, x), x))
    with no_grad():
        (g,) = grad(y, [x], create_graph=True)
    (gg,) = grad(engine.tensor_sum(g), [x])
    assert np.allclose(gg.data, 6.0 * 0.7)


def test_mean_count_normalization():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    head = engine.mean(x)
    (g,) = grad(head, [x])
    assert np.allclose(g.data, 1.0 / 12.0)
    per_axis = engine.mean(x, axis=0)
    assert np.allclose(per_axis.data, x.data.mean(axis=0))
