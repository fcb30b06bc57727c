import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from tglearn import tensor as T
from tglearn.errors import CheckError, DimensionError, ParameterError
from tglearn.gradcheck import grad_check
from tglearn.losses import bce_with_logits, cross_entropy_smoothed
from tglearn.optim import AdamW, AdamWState, adamw_step
from tglearn.rng import RngState
from tglearn.tensor import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# matmul

def test_matmul_identity():
    out = T.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_hand():
    np.testing.assert_array_equal(T.matmul(t64([[1, 2]]), t64([[3], [4]])).data, [[11]])


def test_matmul_gradcheck():
    a, b = t64(rand((3, 4), 1)), t64(rand((4, 2), 2))
    rep = grad_check(lambda x, y: T.tsum(T.matmul(x, y) * T.matmul(x, y)), [a, b], tolerance=1e-6)
    assert rep.passed, str(rep)


def test_matmul_batched_gradcheck():
    a, b = t64(rand((2, 3, 4), 1)), t64(rand((4, 5), 2))
    assert grad_check(lambda x, y: T.tsum(T.tanh(T.matmul(x, y))), [a, b], tolerance=1e-6).passed


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# layer norm

def test_layer_norm_constant_row():
    out = T.layer_norm(t64(np.full((1, 4), 3.0)), t64(np.ones(4)), t64(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_hand():
    out = T.layer_norm(t64([[1.0, 3.0]]), t64(np.ones(2)), t64(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]])


def test_layer_norm_gradcheck():
    x, g, b = t64(rand((2, 5), 3)), t64(rand(5, 4)), t64(rand(5, 5))
    w = rand((2, 5), 6)
    rep = grad_check(lambda x, g, b: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b], tolerance=1e-6)
    assert rep.passed, str(rep)


# dropout

def test_dropout_rate_zero_identity():
    x = t64(rand((3, 3)))
    assert T.dropout(x, 0.0, RngState(0), training=True) is x


def test_dropout_eval_identity():
    x = t64(rand((3, 3)))
    np.testing.assert_array_equal(T.dropout(x, 0.5, RngState(0), training=False).data, x.data)


def test_dropout_rejects_rate_one():
    with pytest.raises(ParameterError):
        T.dropout(t64(np.ones(3)), 1.0, RngState(0), training=True)


def test_dropout_keeps_expectation():
    x = t64(np.ones(200_000))
    out = T.dropout(x, 0.3, RngState(4), training=True).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) <= {0.0, 1 / 0.7}


# losses

def test_cross_entropy_uniform():
    assert math.isclose(cross_entropy_smoothed(t64([[0.0, 0.0]]), [0]).item(), math.log(2))


def test_cross_entropy_smoothing_uniform_invariant():
    assert math.isclose(cross_entropy_smoothed(t64([[0.0, 0.0]]), [0], 0.2).item(), math.log(2))


def test_cross_entropy_oracle():
    logits = rand((6, 3), 7)
    labels = np.array([0, 2, 1, 1, 0, 2])
    eps = 0.3
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    target = np.full((6, 3), eps / 3)
    target[np.arange(6), labels] += 1 - eps
    expected = -(target * np.log(p)).sum() / 6
    assert math.isclose(cross_entropy_smoothed(t64(logits), labels, eps).item(), expected, rel_tol=1e-12)


def test_cross_entropy_gradcheck():
    labels = np.array([0, 2, 1, 1])
    rep = grad_check(lambda z: cross_entropy_smoothed(z, labels, 0.1), [t64(rand((4, 3), 8))],
                     tolerance=1e-6)
    assert rep.passed


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        cross_entropy_smoothed(t64([[0.0, 0.0]]), [2])


def test_bce_hand():
    assert math.isclose(bce_with_logits(t64([0.0]), [1]).item(), math.log(2))


def test_bce_large_logit_stable():
    with np.errstate(all="raise"):
        v = bce_with_logits(t64([100.0]), [1]).item()
    assert 0 <= v < 1e-40
    assert math.isclose(bce_with_logits(t64([100.0]), [0]).item(), 100.0)


def test_bce_gradcheck():
    targets = np.array([1, 0, 1, 0, 1])
    assert grad_check(lambda z: bce_with_logits(z, targets), [t64(rand(5, 9) * 3)],
                      tolerance=1e-6).passed


# backward

def test_backward_sum_ones():
    x = t64(rand((2, 2)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_quadratic():
    x = t64([1.0, 2.0])
    T.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_shared_node_accumulates():
    x = t64([3.0])
    y = x * x
    T.tsum(y + y).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


def test_backward_needs_scalar():
    with pytest.raises(Exception):
        (t64(np.ones(3)) * 2).backward()


def test_no_grad_builds_no_tape():
    x = t64([1.0])
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_broadcast_add_gradient():
    a, b = t64(rand((3, 4), 1)), t64(rand(4, 2))
    T.tsum(a + b).backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


# per-op finite-difference checks

ELEMENTWISE = {
    "exp": T.exp, "tanh": T.tanh, "sigmoid": T.sigmoid, "gelu": T.gelu,
    "relu": T.relu, "neg": T.neg, "sq": lambda x: T.power(x, 2.0),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradcheck(name):
    x = rand((3, 4), 11)
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # avoid the kink
    w = rand((3, 4), 12)
    rep = grad_check(lambda v: T.tsum(ELEMENTWISE[name](v) * w), [t64(x)], tolerance=1e-6)
    assert rep.passed, f"{name}: {rep}"


def test_log_sqrt_div_gradcheck():
    x, y = t64(np.abs(rand((3, 3), 13)) + 0.5), t64(np.abs(rand((3, 3), 14)) + 0.5)
    assert grad_check(lambda a, b: T.tsum(T.log(a) * T.sqrt(b) / a), [x, y], tolerance=1e-6).passed


def test_softmax_family_gradcheck():
    x = t64(rand((3, 5), 15))
    w = rand((3, 5), 16)
    assert grad_check(lambda v: T.tsum(T.softmax(v) * w), [x], tolerance=1e-6).passed
    assert grad_check(lambda v: T.tsum(T.log_softmax(v) * w), [x], tolerance=1e-6).passed


def test_shape_ops_gradcheck():
    x = t64(rand((2, 3, 4), 17))
    w = rand((4, 6), 18)

    def f(v):
        a = T.reshape(T.transpose(v, (0, 2, 1)), (8, 3))
        b = T.concat([a, a * 2], axis=1)
        c = T.index_select(b, [0, 3, 3, 7])
        return T.tsum(T.matmul(T.swapaxes(c, 0, 1), t64(rand((4, 2), 19), grad=False))) + \
            T.tsum(T.tmean(v, axis=1) * w[:, :4].T[:2, :])

    assert grad_check(f, [x], tolerance=1e-6).passed


def test_embedding_gradcheck_repeated_ids():
    w = t64(rand((5, 3), 20))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    m = rand((2, 3, 3), 21)
    assert grad_check(lambda e: T.tsum(T.embedding(e, ids) * m), [w], tolerance=1e-6).passed


def test_spmm_gradcheck():
    A = sp.random(6, 6, density=0.4, random_state=1, format="csr")
    h = t64(rand((6, 3), 22))
    w = rand((6, 3), 23)
    assert grad_check(lambda v: T.tsum(T.spmm(A, v) * w), [h], tolerance=1e-6).passed
    np.testing.assert_allclose(T.spmm(A, h).data, A.toarray() @ h.data)


def test_gradcheck_quadratic():
    x = t64(rand(7, 24))
    assert grad_check(lambda v: T.tsum(v * v), [x], tolerance=1e-8).passed


def test_gradcheck_detects_wrong_gradient():
    def bad(v):
        return T._make(np.asarray((v.data ** 2).sum()), (v,), lambda g: (g * v.data,))

    rep = grad_check(bad, [t64(rand(4, 25))])
    assert not rep.passed


def test_gradcheck_rejects_float32():
    with pytest.raises(CheckError):
        grad_check(lambda v: T.tsum(v), [Tensor(np.ones(2, dtype=np.float32), requires_grad=True)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_grad_matches_closed_form(n, k, m, seed):
    a, b = rand((n, k), seed), rand((k, m), seed + 1)
    ta, tb = t64(a), t64(b)
    T.tsum(T.matmul(ta, tb)).backward()
    np.testing.assert_allclose(ta.grad, np.ones((n, m)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((n, m)), atol=1e-12)


# AdamW

def test_adamw_zero_grad_no_decay_unchanged():
    p = np.array([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], AdamWState(0.1))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamw_first_step_unit_update():
    p = np.zeros(1)
    adamw_step([p], [np.ones(1)], AdamWState(0.1, epsilon=0.0))
    np.testing.assert_allclose(p, [-0.1], rtol=1e-12)


def test_adamw_decoupled_decay():
    p = np.array([2.0])
    adamw_step([p], [np.zeros(1)], AdamWState(0.1, weight_decay=0.5))
    np.testing.assert_allclose(p, [2.0 * (1 - 0.05)])


def test_adamw_oracle_three_steps():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.1])]
    p = np.array([1.0, 2.0])
    ref, m, v = p.copy(), np.zeros(2), np.zeros(2)
    state = AdamWState(lr, wd, b1, b2, eps)
    for t, g in enumerate(grads, 1):
        adamw_step([p], [g], state)
        ref = ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p, ref, rtol=1e-14)


def test_adamw_minimizes_quadratic():
    x = t64([3.0, -4.0])
    opt = AdamW([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        T.tsum(x * x).backward()
        opt.step()
    assert np.abs(x.data).max() < 1e-2


def test_adamw_rejects_negative_lr():
    with pytest.raises(ParameterError):
        AdamWState(-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 7), min_size=0, max_size=20), st.integers(0, 10**6))
def test_gather_backward_matches_add_at(n, idx, seed):
    idx = np.array([i % n for i in idx], dtype=np.int64)
    rng = np.random.default_rng(seed)
    a = t64(rng.normal(size=(n, 3)))
    g = rng.normal(size=(len(idx), 3))
    T.tsum(T.index_select(a, idx) * g).backward()
    ref = np.zeros((n, 3))
    np.add.at(ref, idx, g)
    np.testing.assert_allclose(a.grad, ref, atol=1e-12)
