import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from setseg import tensor as T
from setseg.tensor import Tensor


def num_grad(fn, x, h=1e-6):
    """Central differences of a scalar numpy function."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(x)
        x[i] = old - h
        fm = fn(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(op, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    proj = [None]

    def value(arrs):
        out = op(*[Tensor(a) for a in arrs]).data
        if proj[0] is None:
            proj[0] = rng.normal(size=out.shape)
        return float((out * proj[0]).sum())

    value(xs)
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    T.tsum(T.mul(op(*ts), proj[0])).backward()
    for k, x in enumerate(xs):
        def f(v, k=k):
            arrs = list(xs)
            arrs[k] = v
            return value(arrs)
        expected = num_grad(f, x.copy())
        np.testing.assert_allclose(ts[k].grad, expected, rtol=tol, atol=tol)


@pytest.mark.parametrize("name,op,shapes,pos", [
    ("add_broadcast", T.add, [(3, 4), (4,)], False),
    ("sub", T.sub, [(2, 3), (2, 3)], False),
    ("mul_broadcast", T.mul, [(2, 3), (2, 1)], False),
    ("div", T.div, [(2, 3), (2, 3)], True),
    ("exp", T.exp, [(5,)], False),
    ("log", T.log, [(5,)], True),
    ("gelu", T.gelu, [(4, 3)], False),
    ("tanh", T.tanh, [(4,)], False),
    ("sigmoid", T.sigmoid, [(6,)], False),
    ("matmul", T.matmul, [(3, 4), (4, 2)], False),
    ("matmul_batched", T.matmul, [(2, 3, 4), (4, 5)], False),
    ("softmax", lambda x: T.softmax(x, -1), [(3, 5)], False),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)], False),
    ("reshape", lambda x: T.reshape(x, (6, 2)), [(3, 4)], False),
    ("transpose", lambda x: T.transpose(x, (1, 0, 2)), [(2, 3, 4)], False),
    ("getitem_repeat", lambda x: T.getitem(x, np.array([0, 2, 0])), [(3, 4)], False),
    ("concat", lambda a, b: T.concat([a, b], axis=0), [(2, 3), (1, 3)], False),
    ("stack", lambda a, b: T.stack([a, b], axis=1), [(2, 3), (2, 3)], False),
    ("sum_axis", lambda x: T.tsum(x, axis=1, keepdims=True), [(3, 4)], False),
    ("mean", lambda x: T.mean(x, axis=0), [(3, 4)], False),
])
def test_op_gradient(name, op, shapes, pos):
    check_op(op, *shapes, positive=pos)


def test_relu_gradient_away_from_kink():
    x = np.array([-2.0, -0.3, 0.4, 1.5])
    t = Tensor(x, requires_grad=True)
    T.tsum(T.relu(t)).backward()
    assert t.grad.tolist() == [0.0, 0.0, 1.0, 1.0]


def test_masked_attention_gradient():
    allow = np.tril(np.ones((4, 4), dtype=bool))
    allow[1, 3] = True
    check_op(lambda q, k, v: T.masked_attention(q, k, v, allow), (2, 4, 3), (2, 4, 3), (2, 4, 3))


def test_masked_attention_ignores_disallowed_values():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    allow = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
    a = T.masked_attention(q, k, v, allow).data
    v2 = v.copy()
    v2[2] += 1e6
    b = T.masked_attention(q, k, v2, allow).data
    assert np.array_equal(a[:2], b[:2])
    assert np.array_equal(a[0], v[0])


def test_masked_attention_rejects_empty_row():
    with pytest.raises(ValueError):
        T.masked_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.array([[1, 0], [0, 0]], bool))


def test_cross_entropy_gradient_and_weights():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 7))
    tgt = np.array([1, 0, 6, 3])
    w = np.array([1.0, 0.0, 1.0, 1.0])
    t = Tensor(logits, requires_grad=True)
    T.cross_entropy(t, tgt, w).backward()
    exp = num_grad(lambda x: T.cross_entropy(x, tgt, w).item(), logits.copy())
    np.testing.assert_allclose(t.grad, exp, atol=1e-7)
    assert not t.grad[1].any()


def test_cross_entropy_uniform_is_log_vocab():
    v = T.cross_entropy(np.zeros((5, 33)), np.arange(5), np.ones(5)).item()
    assert abs(v - math.log(33)) < 1e-12


def test_cross_entropy_needs_weight():
    with pytest.raises(ValueError):
        T.cross_entropy(np.zeros((2, 3)), [0, 1], [0.0, 0.0])


def test_bce_gradient_inside_and_clamped():
    p = np.array([0.2, 0.7, 0.0, 1.0])
    t = np.array([1.0, 0.0, 1.0, 0.0])
    x = Tensor(p, requires_grad=True)
    T.tsum(T.bce(x, t)).backward()
    assert x.grad[2] == 0.0 and x.grad[3] == 0.0
    np.testing.assert_allclose(x.grad[:2], [-1 / 0.2, 1 / 0.3], rtol=1e-12)
    lo = -math.log(T.BCE_CLAMP)
    hi = -math.log(1.0 - (1.0 - T.BCE_CLAMP))  # same value, as the clamp is represented in float64
    np.testing.assert_allclose(T.bce(p, t).data[2:], [lo, hi], rtol=1e-12)


def test_sigmoid_is_stable():
    out = T.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    assert out.tolist() == [0.0, 0.5, 1.0]


def test_embedding_range_check():
    table = Tensor(np.eye(3), requires_grad=True)
    with pytest.raises(IndexError):
        T.embedding(table, [0, 3])
    T.tsum(T.embedding(table, [2, 2, 0])).backward()
    assert table.grad.sum(axis=1).tolist() == [3.0, 0.0, 6.0]


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(2), requires_grad=True).backward()


def test_leaf_gradients_accumulate():
    x = Tensor(np.array(2.0), requires_grad=True)
    T.mul(x, x).backward()
    T.mul(x, x).backward()
    assert x.grad == 8.0


def test_shared_subgraph_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.exp(x)
    T.tsum(T.add(y, T.mul(y, 3.0))).backward()
    np.testing.assert_allclose(x.grad, 4 * np.exp([1.0, 2.0]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_nonfinite_raises():
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        T.log(np.array([0.0]))


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(x, c):
    a = T.softmax(x).data
    b = T.softmax(x + c).data
    np.testing.assert_allclose(a.sum(-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 8), elements=st.floats(-10, 10)))
def test_layer_norm_moments(x):
    x = x + np.linspace(0, 1, 8)  # keep rows away from zero variance
    out = T.layer_norm(x, np.ones(8), np.zeros(8)).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-10)
    var = ((x - x.mean(-1, keepdims=True)) ** 2).mean(-1)
    np.testing.assert_allclose((out ** 2).mean(-1), var / (var + 1e-5), rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite),
       st.floats(-3, 3))
def test_matmul_is_linear(a, b, c):
    lhs = T.matmul(a * c, b).data
    np.testing.assert_allclose(lhs, c * (a @ b), rtol=1e-9, atol=1e-7)
