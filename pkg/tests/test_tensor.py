import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from director import tensor as T
from director.tensor import Tensor
from helpers import analytic_grads, check_gradients


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# each entry builds (params, loss_fn) from an rng; every tensor has <= 8 elements
def _cases():
    def weighted(x, _unused=None):
        # fixed, non-uniform weights so every output entry matters differently
        w = np.cos(1.3 * np.arange(x.size) + 0.7).reshape(x.shape)
        return T.mul(x, w).sum()

    def c_add(rng):
        a, b = leaf(rng, 2, 4), leaf(rng, 4)
        w = rng.normal(size=(2, 4))
        return [a, b], lambda: T.mul(a + b, w).sum()

    def c_sub(rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        w = rng.normal(size=(2, 3))
        return [a, b], lambda: T.mul(a - b, w).sum()

    def c_mul(rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
        return [a, b], lambda: (a * b).sum()

    def c_matmul(rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)
        w = rng.normal(size=(2, 2))
        return [a, b], lambda: T.mul(a @ b, w).sum()

    def c_batched_matmul(rng):
        a, b = leaf(rng, 2, 2, 2), leaf(rng, 2, 2, 2)
        w = rng.normal(size=(2, 2, 2))
        return [a, b], lambda: T.mul(a @ b, w).sum()

    def c_exp(rng):
        a = leaf(rng, 6)
        return [a], lambda: weighted(T.exp(a))

    def c_log(rng):
        a = leaf(rng, 6, lo=0.5, hi=3.0)
        return [a], lambda: weighted(T.log(a))

    def c_sigmoid(rng):
        a = leaf(rng, 6, lo=-6, hi=6)
        return [a], lambda: weighted(T.sigmoid(a))

    def c_log_sigmoid(rng):
        a = leaf(rng, 6, lo=-6, hi=6)
        return [a], lambda: weighted(T.log_sigmoid(a))

    def c_gelu(rng):
        a = leaf(rng, 8, lo=-3, hi=3)
        return [a], lambda: weighted(T.gelu(a))

    def c_softmax(rng):
        a = leaf(rng, 2, 4)
        return [a], lambda: weighted(T.softmax(a))

    def c_log_softmax(rng):
        a = leaf(rng, 2, 4)
        return [a], lambda: weighted(T.log_softmax(a))

    def c_layer_norm(rng):
        a, g, b = leaf(rng, 2, 4), leaf(rng, 4), leaf(rng, 4)
        return [a, g, b], lambda: weighted(T.layer_norm(a, g, b))

    def c_embedding(rng):
        table = leaf(rng, 4, 2)
        ids = np.array([[0, 3, 3], [1, 0, 2]])
        return [table], lambda: weighted(T.embedding(table, ids))

    def c_take_last(rng):
        a = leaf(rng, 2, 4)
        idx = np.array([3, 1])
        return [a], lambda: weighted(T.take_last(a, idx))

    def c_getitem(rng):
        a = leaf(rng, 2, 4)
        return [a], lambda: weighted(a[:, 1:3]) + weighted(a[np.array([0, 0]), np.array([1, 1])])

    def c_concat(rng):
        a, b = leaf(rng, 2, 2), leaf(rng, 2, 1)
        return [a, b], lambda: weighted(T.concat([a, b], axis=1))

    def c_reductions(rng):
        a = leaf(rng, 2, 4)
        return [a], lambda: weighted(a.sum(axis=0)) + weighted(a.mean(axis=1, keepdims=True))

    def c_reshape_transpose(rng):
        a = leaf(rng, 2, 4)
        return [a], lambda: weighted(a.reshape(4, 2).transpose(1, 0))

    def c_masked_fill(rng):
        a = leaf(rng, 2, 3)
        mask = np.array([[False, True, False], [False, False, True]])
        return [a], lambda: weighted(T.softmax(T.masked_fill(a, mask, -np.inf)))

    def c_maximum(rng):
        a = leaf(rng, 6)
        return [a], lambda: weighted(T.maximum(a, 0.05))

    return {name[2:]: fn for name, fn in locals().items() if name.startswith("c_")}


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    params, loss_fn = CASES[name](rng)
    if name == "maximum":
        for p in params:  # keep clear of the kink
            p.data[np.abs(p.data - 0.05) < 1e-3] += 0.01
    assert check_gradients(loss_fn, params) < 1e-4


def test_spec_values():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    m = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor(np.eye(2))
    assert np.array_equal(m.data, [[1, 2], [3, 4]])
    assert np.allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_sum_gradient_is_ones_and_loss_grad_is_one():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))
    assert loss.grad == 1.0


def test_sigmoid_gradient_at_zero():
    w = Tensor(0.0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sigmoid(w) * 1.0
    tape.backward(loss)
    assert w.grad == 0.25


def test_reused_tensor_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (x * x).sum() + x.sum()
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_twice_rejected():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (x * 2.0).sum()
    tape.backward(loss)
    with pytest.raises(T.TapeError):
        tape.backward(loss)


def test_default_tape_backward_and_reuse_rejected():
    x = Tensor([1.0, -1.0], requires_grad=True)
    loss = T.exp(x).sum()
    T.backward(loss)
    assert np.allclose(x.grad, np.exp(x.data))
    with pytest.raises(T.TapeError):
        T.backward(loss)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = x * 3.0
    with pytest.raises(T.ShapeError):
        tape.backward(y)


def test_backward_without_tape_rejected():
    with pytest.raises(T.TapeError):
        T.backward(Tensor(1.0).sum())


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape, T.no_grad():
        (x * 2.0).sum()
    assert len(tape) == 0
    assert T.grad_enabled()


def test_tape_records_in_topological_order():
    x = Tensor([0.5, 1.5], requires_grad=True)
    with T.Tape() as tape:
        y = T.exp(x)
        z = y * 2.0
        z.sum()
    outs = [rec[0] for rec in tape.records]
    ins = [rec[1] for rec in tape.records]
    assert outs[0] is y and ins[1][0] is y and ins[2][0] is z


def test_shape_errors_are_descriptive():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_softmax_over_empty_axis_rejected():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((2, 0))))
    with pytest.raises(ValueError):
        T.log_softmax(Tensor(np.zeros((0,))))


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    p = T.softmax(Tensor(values)).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0) and np.all(p <= 1)


@given(st.lists(st.floats(-15, 15), min_size=1, max_size=12))
def test_softmax_entries_strictly_inside_unit_interval(values):
    p = T.softmax(Tensor(values)).data
    if len(values) > 1:
        assert np.all(p > 0) and np.all(p < 1)


def test_log_softmax_and_sigmoid_are_stable_for_large_inputs():
    lp = T.log_softmax(Tensor([1000.0, 0.0, -1000.0])).data
    assert np.isfinite(lp).all() and lp[0] == 0.0
    s = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert s[0] >= 0 and s[1] == 1.0 and np.isfinite(s).all()
    assert np.isfinite(T.log_sigmoid(Tensor([-800.0, 800.0])).data).all()


@settings(max_examples=50)
@given(seed=st.integers(0, 2 ** 32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 3)
    w = rng.normal(size=(3, 2))

    def f():
        return T.log_softmax(x @ Tensor(w)).sum()

    def g():
        return T.gelu(x).sum()

    gf = analytic_grads(f, [x])[0]
    gg = analytic_grads(g, [x])[0]
    gc = analytic_grads(lambda: f() * a + g() * b, [x])[0]
    assert np.allclose(gc, a * gf + b * gg, atol=1e-12)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x, w = leaf(rng, 3, 4), leaf(rng, 4, 4)
        with T.Tape() as tape:
            loss = T.log_softmax(T.gelu(x @ w)).mean()
        tape.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.size == math.prod(t.shape) == len(t.values)
    assert t.tape_id is None
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (x * 2.0).sum()
    assert loss.tape_id == tape.id
    tape.backward(loss)
    assert x.grad.shape == x.shape


def test_independent_tapes_on_threads():
    results = {}

    def work(k):
        x = Tensor([float(k)], requires_grad=True)
        with T.Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        results[k] = x.grad[0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(4)}


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((3, 2))), np.array([0, 3]))
