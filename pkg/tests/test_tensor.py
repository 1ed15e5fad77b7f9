import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scratchpad import tensor as T
from scratchpad.rng import Rng

from oracles import GRAD_TOL, gradcheck, project


def leaf(shape, seed=0, scale=1.0):
    return T.tensor(np.random.default_rng(seed).normal(size=shape) * scale, requires_grad=True)


UNARY = {
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "exp": T.exp,
    "neg": lambda x: -x,
    "square": lambda x: x ** 2,
    "scale": lambda x: T.scale(x, -2.5),
    "softmax": T.softmax,
    "log_softmax": T.log_softmax,
    "sum_all": T.tensor_sum,
    "sum_axis": lambda x: T.tensor_sum(x, axis=1),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "expand": lambda x: T.expand(x, 1, 3),
    "slice": lambda x: T.slice_last(x, 1, 3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = leaf((3, 4), seed=1)
    assert gradcheck(lambda: project(UNARY[name](x)), [x]) < GRAD_TOL


def test_log_gradient_on_positive_inputs():
    x = T.tensor(np.random.default_rng(2).uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    assert gradcheck(lambda: project(T.log(x)), [x]) < GRAD_TOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "minimum"])
def test_binary_gradients(op):
    a, b = leaf((2, 5), 3), leaf((2, 5), 4)
    fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "minimum": T.minimum}[op]
    assert gradcheck(lambda: project(fn(a, b)), [a, b]) < GRAD_TOL


def test_scalar_broadcast_gradients():
    a, w = leaf((2, 3), 5), leaf((), 6)
    assert gradcheck(lambda: project(T.mul(a, w) + 1.5), [a, w]) < GRAD_TOL


def test_matmul_and_linear_gradients():
    x, w, b = leaf((2, 3, 4), 7), leaf((4, 5), 8), leaf((5,), 9)
    assert gradcheck(lambda: project(T.matmul(x, w)), [x, w]) < GRAD_TOL
    assert gradcheck(lambda: project(T.linear(x, w, b)), [x, w, b]) < GRAD_TOL


def test_masked_softmax_gradient_and_zeros():
    x = leaf((2, 4), 10)
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    out = T.softmax(x, mask)
    assert np.all(out.data[~mask] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert gradcheck(lambda: project(T.softmax(x, mask)), [x]) < GRAD_TOL


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ValueError):
        T.softmax(leaf((1, 3)), np.zeros((1, 3), dtype=bool))


def test_layer_norm_gradients():
    x, g, b = leaf((3, 5), 11), leaf((5,), 12), leaf((5,), 13)
    assert gradcheck(lambda: project(T.layer_norm(x, g, b)), [x, g, b]) < GRAD_TOL


def test_concat_stack_gradients():
    a, b = leaf((2, 3), 14), leaf((2, 2), 15)
    assert gradcheck(lambda: project(T.concat([a, b], axis=-1)), [a, b]) < GRAD_TOL
    c = leaf((2, 3), 16)
    assert gradcheck(lambda: project(T.stack([a, c], axis=1)), [a, c]) < GRAD_TOL


def test_gather_gradients():
    table = leaf((5, 3), 17)
    ids = np.array([[0, 4], [4, 2]])
    assert gradcheck(lambda: project(T.embedding_lookup(table, ids)), [table]) < GRAD_TOL
    assert gradcheck(lambda: project(T.take_rows(table, np.array([1, 1, 3]))), [table]) < GRAD_TOL
    x = leaf((3, 4), 18)
    assert gradcheck(lambda: project(T.pick(x, np.array([3, 0, 0]))), [x]) < GRAD_TOL


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        T.embedding_lookup(leaf((4, 2)), [1, 4])


def test_dropout_gradient_uses_same_mask():
    x = leaf((4, 6), 19)
    rng = Rng(0, ("drop",))
    # a fresh generator per evaluation gives the same mask every time
    assert gradcheck(lambda: project(T.dropout(x, 0.3, rng.child("m").generator, True)), [x]) < GRAD_TOL


def test_dropout_is_identity_when_not_training():
    x = leaf((3, 3))
    assert T.dropout(x, 0.5, None, training=False) is x


def test_shared_subexpression_accumulates():
    x = leaf((3,), 20)

    def build():
        y = T.tanh(x)
        return T.tensor_sum(y * y + y)

    assert gradcheck(build, [x]) < GRAD_TOL


def test_leaf_grads_accumulate_across_backward_calls():
    x = leaf((2,), 21)
    T.backward(T.tensor_sum(x))
    T.backward(T.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_shape_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.add(leaf((2, 3)), leaf((3, 2)))
    with pytest.raises(T.ShapeError):
        T.backward(leaf((2,)))


def test_non_finite_loss_raises():
    x = T.tensor(np.array([-1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        loss = T.tensor_sum(T.log(x))
    with pytest.raises(T.NonFiniteError):
        T.backward(loss)


def test_no_grad_builds_no_tape():
    x = leaf((2,))
    with T.no_grad():
        y = T.tanh(x)
    assert y.node is None and not y.requires_grad
    assert T.grad_enabled()


def test_tape_is_in_creation_order():
    x = leaf((2,))
    y = T.tanh(x)
    z = T.exp(y)
    loss = T.tensor_sum(z)
    assert T.Tape.from_output(loss).ops() == ["tanh", "exp", "sum"]


def test_sigmoid_extreme_inputs_are_finite():
    out = T.sigmoid(T.tensor(np.array([-1000.0, 0.0, 1000.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(T.tensor(x[None, :])).data[0]
    assert np.all(p >= 0)
    assert math.isclose(p.sum(), 1.0, abs_tol=1e-12)
    np.testing.assert_allclose(np.log(p + 1e-300), T.log_softmax(T.tensor(x[None, :])).data[0], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_matches_numpy(n, k, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(n, k)), g.normal(size=(k, 3))
    np.testing.assert_allclose(T.matmul(T.tensor(a), T.tensor(b)).data, a @ b, rtol=0, atol=1e-12)
