import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irss.diffcore import (
    Adam, SGD, Tensor, concat, conv2d, grad_reverse, log_softmax, make_optimizer, mean_pool2d,
    no_grad, softmax,
)
from irss.diffcore.gradcheck import max_rel_error, numeric_grad
from irss.diffcore.tensor import is_grad_enabled
from irss.errors import ConfigError, ContractError, PreconditionError, ShapeError


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def check(loss_fn, tensors, tol=1e-6):
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad for t in tensors]
    numeric = numeric_grad(loss_fn, tensors)
    assert max_rel_error(analytic, numeric) < tol


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "sub": lambda a, b: (a - b * 2.0).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "pow": lambda a, b: (a ** 3).mean(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "exp": lambda a, b: (a * 0.3).exp().sum(),
    "log": lambda a, b: (a * a + 1.0).log().sum(),
    "tanh": lambda a, b: a.tanh().sum(),
    "relu": lambda a, b: (a.relu() * b).sum(),
    "softmax": lambda a, b: (softmax(a) * b).sum(),
    "log_softmax": lambda a, b: (log_softmax(a) * b).sum(),
    "index": lambda a, b: a[np.array([0, 2, 2]), np.array([1, 0, 1])].sum(),
    "sum_axis": lambda a, b: (a.sum(axis=0) * b[1]).sum(),
    "mean_keepdims": lambda a, b: (a.mean(axis=1, keepdims=True) * b).sum(),
    "reshape_T": lambda a, b: (a.reshape(4, 3).T * b.reshape(3, 4)).sum(),
    "concat": lambda a, b: (concat([a, b], axis=1) ** 2).sum(),
    "clip_min": lambda a, b: (a.clip_min(0.1) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(len(name))
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    # keep relu and clip kinks away from the finite-difference stencil
    a.data[np.abs(a.data) < 1e-2] += 0.1
    a.data[np.abs(a.data - 0.1) < 1e-2] += 0.05
    check(lambda: OPS[name](a, b), [a, b])


def test_conv2d_and_pool_gradients():
    rng = np.random.default_rng(0)
    x, w, b = leaf(rng, 2, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    check(lambda: (mean_pool2d(conv2d(x, w, b), 2) ** 2).sum(), [x, w, b])


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((2, 4, 3, 4))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mean_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_allclose(mean_pool2d(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert x.grad[0] == pytest.approx(2 * 2 + 3 * 4)


def test_backward_returns_leaf_grads():
    a = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    leaves = (a * c * 2.0).sum().backward()
    assert list(leaves) == [a]
    np.testing.assert_allclose(leaves[a], 2.0)


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (a * 2.0).backward()


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_grad_builds_no_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        out = (a * 3.0).sum()
    assert is_grad_enabled()
    assert not out.requires_grad


def test_grad_reverse_forward_identity_backward_negated():
    rng = np.random.default_rng(2)
    x = leaf(rng, 4, 3)
    w = rng.standard_normal((4, 3))
    out = grad_reverse(x, 0.7)
    np.testing.assert_array_equal(out.data, x.data)
    (out * w).sum().backward()
    np.testing.assert_allclose(x.grad, -0.7 * w)


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        grad_reverse(Tensor(np.ones(2), requires_grad=True), -1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(row):
    p = softmax(Tensor(np.array([row]))).data
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.log(np.maximum(p, 1e-300)),
                               log_softmax(Tensor(np.array([row]))).data, atol=1e-9)


def test_sgd_momentum_update_rule():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    g = np.array([0.5, 1.0])
    p.grad = g.copy()
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 0.05, -2.0 - 0.1])
    p.grad = g.copy()
    opt.step()
    # v = 0.9 * g + g
    np.testing.assert_allclose(p.data, [0.95 - 0.1 * 1.9 * 0.5, -2.1 - 0.1 * 1.9])


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    p.grad = np.array([0.2, -5.0, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3], atol=1e-8)


def test_optimizer_touches_only_its_parameters():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    (a * b).sum().backward()
    before = b.data.copy()
    make_optimizer("sgd_momentum", {"a": a}, lr=0.1).step()
    np.testing.assert_array_equal(b.data, before)
    assert not np.array_equal(a.data, before)


def test_optimizer_errors():
    a = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ConfigError):
        make_optimizer("adam", {"a": a}, lr=-1.0)
    with pytest.raises(ConfigError):
        make_optimizer("rmsprop", {"a": a})
    with pytest.raises(PreconditionError):
        make_optimizer("adam", {"a": a}).step()
