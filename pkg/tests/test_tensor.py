"""Reverse-mode engine: per-op gradients against finite differences, tape contracts."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mapd_lab import tensor as tn
from mapd_lab.tensor import Tensor

dims = st.integers(1, 4)
finite = st.floats(-2, 2, allow_nan=False, width=64)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


def check_grad(f, *xs, tol=1e-6):
    """Gradient of the scalar ``sum(f(*leaves) * w)`` for a fixed random weight ``w``."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = f(*leaves)
    w = np.random.default_rng(0).normal(size=out.shape)
    with tn.Tape() as tape:
        loss = tn.sum_(tn.mul(f(*leaves), Tensor(w)))
    grads = tape.backward(loss)

    for leaf, x in zip(leaves, xs):
        def value():
            with tn.no_tape():
                return float((f(*[Tensor(l.data) for l in leaves]).data * w).sum())
        num = tn.numerical_gradient(value, leaf.data)
        ana = grads.get(leaf, np.zeros_like(x))
        # vanishing gradients are compared in absolute terms
        assert tn.grad_check_error(ana, num) < tol or np.abs(ana - num).max() < 1e-7


@given(st.data())
def test_elementwise_grads(data):
    shape = data.draw(st.tuples(dims, dims))
    a, b = data.draw(arrays(shape)), data.draw(arrays(shape))
    check_grad(tn.add, a, b)
    check_grad(tn.sub, a, b)
    check_grad(tn.mul, a, b)
    check_grad(tn.exp, a)
    check_grad(tn.gelu, a)
    check_grad(lambda x: tn.log(tn.add(tn.mul(x, x), Tensor(np.ones(shape)))), a)


@given(st.data())
def test_broadcast_add_reduces_gradient(data):
    r, c = data.draw(dims), data.draw(dims)
    check_grad(tn.add, data.draw(arrays((r, c))), data.draw(arrays((1, c))))
    check_grad(tn.mul, data.draw(arrays((r, c))), data.draw(arrays((c,))))


@given(st.data())
def test_matmul_grad(data):
    r, k, c = data.draw(dims), data.draw(dims), data.draw(dims)
    check_grad(tn.matmul, data.draw(arrays((r, k))), data.draw(arrays((k, c))))
    check_grad(tn.matmul, data.draw(arrays((2, r, k))), data.draw(arrays((k, c))))


@given(st.data())
def test_softmax_and_layer_norm_grads(data):
    r, c = data.draw(dims), data.draw(st.integers(2, 5))
    x = data.draw(arrays((r, c)))
    check_grad(tn.softmax_rows, x)
    g, b = data.draw(arrays((c,))), data.draw(arrays((c,)))
    check_grad(lambda x, g, b: tn.layer_norm(x, g, b), x + np.arange(c), g, b, tol=1e-5)


@given(st.data())
def test_shape_op_grads(data):
    r, c = data.draw(dims), data.draw(dims)
    x = data.draw(arrays((r, c)))
    check_grad(lambda t: tn.reshape(t, (c, r)), x)
    check_grad(lambda t: tn.transpose(t), x)
    check_grad(lambda t: tn.concat([t, t], axis=1), x)
    check_grad(lambda t: t[:, :1], x)
    idx = data.draw(hnp.arrays(np.int64, (3,), elements=st.integers(0, r - 1)))
    check_grad(lambda t: tn.gather_rows(t, idx), x)
    check_grad(lambda t: tn.mean(t, axis=0, keepdims=True), x)


@given(st.data())
def test_cross_entropy_grad_and_value(data):
    T, V = data.draw(dims), data.draw(st.integers(2, 6))
    logits = data.draw(arrays((T, V)))
    targets = data.draw(hnp.arrays(np.int64, (T,), elements=st.integers(0, V - 1)))
    mask = np.ones(T)
    mask[0] = 0.5
    check_grad(lambda l: tn.cross_entropy_logits(l, targets, mask), logits)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = -(mask * np.log(p[np.arange(T), targets])).sum() / mask.sum()
    assert tn.cross_entropy_logits(Tensor(logits), targets, mask).item() == pytest.approx(expected, rel=1e-12)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 7)) * 30)
    assert np.allclose(tn.softmax_rows(x).data.sum(1), 1.0, atol=1e-12)


def test_frozen_leaves_receive_no_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    with tn.Tape() as tape:
        loss = tn.sum_(tn.matmul(a, b))
    grads = tape.backward(loss)
    assert a in grads and b not in grads


def test_non_finite_forward_names_the_op():
    x = Tensor(np.array([1000.0]), requires_grad=True)
    with tn.Tape():
        with pytest.raises(tn.NonFiniteError, match="exp"):
            tn.exp(x)


def test_matmul_shape_error():
    with pytest.raises(tn.ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with tn.Tape() as tape:
        y = tn.scale(x, 2.0)
    with pytest.raises(tn.UsageError):
        tape.backward(y)                       # not a scalar
    with tn.Tape() as other:
        loss = tn.sum_(tn.scale(x, 2.0))
    with pytest.raises(tn.UsageError):
        tape.backward(loss)                    # recorded on another tape
    assert np.array_equal(other.backward(loss)[x], np.full(3, 2.0))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with tn.Tape() as tape:
        with tn.no_tape():
            y = tn.scale(x, 3.0)
    assert tape.nodes == [] and not y.requires_grad


def test_shared_leaf_gradients_accumulate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with tn.Tape() as tape:
        loss = tn.sum_(tn.add(tn.mul(x, x), x))
    assert np.allclose(tape.backward(loss)[x], 2 * x.data + 1)


def test_mac_counter_counts_matmuls():
    a, b = Tensor(np.ones((3, 4, 5))), Tensor(np.ones((5, 6)))
    with tn.count_macs() as c:
        tn.matmul(a, b)
    assert c.macs == 3 * 4 * 5 * 6 and c.flops == 2 * c.macs
