import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glidn import autodiff as ad
from glidn.autodiff import Tape, Tensor, backward, grad_check, no_grad


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def mp_softmax(z):
    e = [mpmath.exp(mpmath.mpf(x)) for x in z]
    s = sum(e)
    return [float(v / s) for v in e]


def test_softmax_matches_high_precision_oracle():
    y = ad.masked_softmax(Tensor([[1.0, 2.0]]), np.ones((1, 2), bool)).data[0]
    assert y == pytest.approx(mp_softmax([1, 2]), abs=1e-15)
    assert y[0] == pytest.approx(0.2689414213699951, abs=1e-15)


def test_cross_entropy_value():
    loss = ad.cross_entropy(Tensor([1.0, 0.0]), 1).item()
    oracle = float(-mpmath.log(mpmath.exp(0) / (mpmath.exp(1) + mpmath.exp(0))))
    assert loss == pytest.approx(oracle, abs=1e-14)
    assert loss == pytest.approx(1.3132616875182228, abs=1e-14)


def test_bce_value():
    loss = ad.bce_with_logits(Tensor([1.0, -1.0]), [1.0, 0.0]).item()
    oracle = float(mpmath.log1p(mpmath.exp(-1)))
    assert loss == pytest.approx(oracle, abs=1e-14)


def test_bce_rejects_soft_targets():
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor([0.0]), [0.5])


def test_bce_is_finite_for_large_logits():
    loss = ad.bce_with_logits(Tensor([800.0, -800.0]), [1.0, 0.0]).item()
    assert loss == 0.0


def test_sigmoid_is_stable():
    y = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    assert np.array_equal(y, [0.0, 0.5, 1.0])


def test_leaky_relu_gradient_at_zero_is_one():
    x = Tensor([0.0, -1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.leaky_relu(x, 0.2))
    backward(loss, tape)
    assert np.array_equal(x.grad, [1.0, 0.2, 1.0])


def test_masked_softmax_zeroes_masked_entries():
    mask = np.array([[True, False, True], [False, True, False], [True, True, True]])
    y = ad.masked_softmax(Tensor(np.arange(9.0).reshape(3, 3)), mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-15)
    assert y[1, 1] == 1.0


def test_masked_softmax_degenerate_row():
    with pytest.raises(ad.DegenerateRowError):
        ad.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_masked_softmax_large_scores_finite():
    y = ad.masked_softmax(Tensor([[1e300, -1e300, 0.0]]), np.ones((1, 3), bool)).data
    assert np.all(np.isfinite(y))


def test_matmul_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_linear_transform_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.linear_transform(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_pool_max_routes_gradient_to_first_argmax():
    x = Tensor([[1.0, 5.0], [1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.pool(x, "max"))
    backward(loss, tape)
    assert np.array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])


def test_pool_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ad.pool(Tensor(np.zeros((2, 2))), "sum")


def test_no_grad_records_nothing(rng):
    w = param(rng, 3)
    with Tape() as tape:
        with no_grad():
            ad.tensor_sum(ad.mul(w, w))
    assert len(tape) == 0


def test_backward_requires_scalar(rng):
    w = param(rng, 3)
    with Tape() as tape:
        y = ad.mul(w, w)
    with pytest.raises(ad.DimensionError):
        backward(y, tape)


def test_unreached_leaf_gets_zero_gradient(rng):
    a, b = param(rng, 2), param(rng, 2)
    with Tape() as tape:
        ad.tensor_sum(b)
        loss = ad.tensor_sum(ad.square(a))
    backward(loss, tape)
    assert np.array_equal(b.grad, np.zeros(2))


def test_repeated_use_accumulates(rng):
    a = param(rng, 3)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.add(a, ad.mul(a, a)))
    backward(loss, tape)
    assert np.allclose(a.grad, 1.0 + 2.0 * a.data)


def test_grad_check_flags_nondeterminism():
    w = Tensor([1.0], requires_grad=True)
    state = {"n": 0}

    def f():
        state["n"] += 1
        return ad.scale(ad.tensor_sum(w), state["n"])

    with pytest.raises(ad.NonDeterministicError):
        grad_check(f, [w])


def test_grad_check_detects_wrong_gradient():
    w = Tensor([0.7, -0.3], requires_grad=True)

    def bad_square(x):
        return ad._emit(x.data ** 2, (x,), lambda g: (3.0 * x.data * g,))

    assert grad_check(lambda: ad.tensor_sum(bad_square(w)), [w]) > 1e-2


SOFTMAX_MASK = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1], [1, 1, 1]], bool)

OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "matmul": lambda a, b: ad.matmul(a, ad.reshape(b, (3, 4))),
    "linear": lambda a, b: ad.linear_transform(a, ad.reshape(b, (4, 3))),
    "concat": lambda a, b: ad.concat_pairwise(a, b),
    "leaky": lambda a, b: ad.leaky_relu(ad.add(a, b), 0.1),
    "softmax": lambda a, b: ad.masked_softmax(ad.add(a, b), SOFTMAX_MASK),
    "pool_mean": lambda a, b: ad.pool(ad.mul(a, b), "mean"),
    "pool_max": lambda a, b: ad.pool(ad.mul(a, b), "max"),
    "sigmoid": lambda a, b: ad.sigmoid(ad.sub(a, b)),
    "log_softmax": lambda a, b: ad.log_softmax(ad.mul(a, b)),
    "cross_entropy": lambda a, b: ad.cross_entropy(ad.mul(a, b), [0, 2, 1, 0]),
    "bce": lambda a, b: ad.bce_with_logits(ad.mul(a, b), np.eye(4, 3)),
    "mean": lambda a, b: ad.tensor_mean(ad.square(ad.sub(a, b))),
    "take": lambda a, b: ad.take(ad.mul(a, b), (slice(1, 3), slice(0, 2))),
}


def weighted_sum(y, weights):
    return ad.tensor_sum(ad.mul(y, Tensor(weights)))


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a, b = param(rng, 4, 3), param(rng, 4, 3)
    if name in ("matmul", "linear"):
        b = param(rng, 12)
    probe = OPS[name](a, b).data
    weights = rng.normal(size=probe.shape)
    err = grad_check(lambda: weighted_sum(OPS[name](a, b), weights), [a, b])
    assert err < 1e-6


def test_batched_matmul_broadcast_gradient(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 2)
    w = rng.normal(size=(2, 3, 2))
    assert grad_check(lambda: weighted_sum(ad.matmul(a, b), w), [a, b]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_log_softmax_normalizes(z):
    lp = ad.log_softmax(Tensor(z)).data
    assert math.isclose(float(np.exp(lp).sum()), 1.0, abs_tol=1e-12)


def test_glorot_bounds(prng):
    w = ad.glorot_uniform((5, 3), prng)
    assert w.requires_grad and np.all(np.abs(w.data) <= math.sqrt(6 / 8))


def test_tensor_operators(rng):
    a, b = param(rng, 2, 2), param(rng, 2, 2)
    assert np.allclose((a + b).data, a.data + b.data)
    assert np.allclose((a - b).data, a.data - b.data)
    assert np.allclose((a * b).data, a.data * b.data)
    assert np.allclose((a @ b).data, a.data @ b.data)
    assert np.allclose((-a).data, -a.data)
