import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glidn import autodiff as ad
from glidn.autodiff import Tensor, grad_check
from glidn.distill import (
    DistillConfig,
    distill_loss,
    kl_distill,
    l2_distill,
    soften_sigmoid,
    softmax_entropy,
    student_objective,
)

TEACHER = [2.0, -1.0, 0.5]
STUDENT = [0.5, 0.3, -0.2]


def mp_kl(t, s, T):
    def sm(z):
        e = [mpmath.exp(mpmath.mpf(x) / T) for x in z]
        tot = sum(e)
        return [v / tot for v in e]

    p, q = sm(t), sm(s)
    return float(sum(pi * mpmath.log(pi / qi) for pi, qi in zip(p, q)))


def mp_l2(t, s, T):
    def sg(x):
        return 1 / (1 + mpmath.exp(-mpmath.mpf(x) / T))

    return float(sum((sg(a) - sg(b)) ** 2 for a, b in zip(t, s)) / len(t))


def test_soften_sigmoid_value():
    assert soften_sigmoid(Tensor([2.0]), 2.0).item() == pytest.approx(float(1 / (1 + mpmath.exp(-1))), abs=1e-15)


def test_soften_sigmoid_literal_flips_sign():
    assert soften_sigmoid(Tensor([2.0]), 2.0, literal=True).item() == pytest.approx(1 - 0.7310585786300049)


def test_kl_value_matches_oracle():
    got = kl_distill(TEACHER, Tensor(STUDENT), 2.0).item()
    assert got == pytest.approx(mp_kl(TEACHER, STUDENT, 2), abs=1e-14)


def test_l2_value_matches_oracle():
    got = l2_distill(TEACHER, Tensor(STUDENT), 2.0).item()
    assert got == pytest.approx(mp_l2(TEACHER, STUDENT, 2), abs=1e-15)


def test_literal_l2_is_unsquared_mean():
    got = l2_distill(TEACHER, Tensor(STUDENT), 2.0, literal=True).item()
    sg = lambda x: 1 / (1 + math.exp(x / 2))
    assert got == pytest.approx(np.mean([sg(a) - sg(b) for a, b in zip(TEACHER, STUDENT)]), abs=1e-15)


@pytest.mark.parametrize("T", [1.0, 2.0, 5.0, 10.0, 20.0])
def test_identical_logits_give_exact_zero(rng, T):
    z = rng.normal(size=(4, 5)) * 3
    assert kl_distill(z, Tensor(z), T).item() == 0.0
    assert l2_distill(z, Tensor(z), T).item() == 0.0


def test_batch_kl_is_row_mean(rng):
    t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    rows = [kl_distill(t[i], Tensor(s[i]), 3.0).item() for i in range(3)]
    assert kl_distill(t, Tensor(s), 3.0).item() == pytest.approx(np.mean(rows), abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=2, max_size=6),
       st.sampled_from([1.0, 2.0, 10.0]))
def test_kl_nonnegative(pairs, T):
    t, s = zip(*pairs)
    assert kl_distill(list(t), Tensor(list(s)), T).item() >= -1e-15


def test_teacher_side_receives_no_gradient(rng):
    t = Tensor(rng.normal(size=3), requires_grad=True)
    s = Tensor(rng.normal(size=3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.add(kl_distill(t, s, 2.0), l2_distill(t, s, 2.0))
    ad.backward(loss, tape)
    assert t.grad is None or not np.any(t.grad)
    assert np.any(s.grad)


@pytest.mark.parametrize("kind", ["kl", "l2"])
def test_distill_gradients(rng, kind):
    t = rng.normal(size=(2, 4))
    s = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    cfg = DistillConfig(temperature=3.0, loss_kind=kind)
    assert grad_check(lambda: distill_loss(t, s, cfg), [s]) < 1e-7


def test_t_squared_scaling(rng):
    t, s = rng.normal(size=3), Tensor(rng.normal(size=3))
    plain = distill_loss(t, s, DistillConfig(temperature=4.0)).item()
    scaled = distill_loss(t, s, DistillConfig(temperature=4.0, t_squared=True)).item()
    assert scaled == pytest.approx(16 * plain, rel=1e-14)


def test_entropy_nondecreasing_in_temperature(rng):
    for _ in range(50):
        z = rng.normal(size=6) * 4
        h = [softmax_entropy(z, T) for T in (1, 2, 5, 10, 20)]
        assert all(b >= a - 1e-12 for a, b in zip(h, h[1:]))


def test_student_objective(rng):
    ce, dl = Tensor(2.0), Tensor(3.0)
    assert student_objective(ce, dl, 0.3, 0.7).item() == pytest.approx(0.3 * 2 + 0.7 * 3)
    with pytest.raises(ValueError):
        student_objective(ce, dl, -1.0, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(teacher_context="local", student_context="local")
    with pytest.raises(ValueError):
        DistillConfig(lambda1=0.0, lambda2=0.0)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    g = DistillConfig.generalized(5.0, 0.3)
    assert g.lambda1 == pytest.approx(0.7) and g.temperature == 5.0
    assert DistillConfig.from_dict(g.to_dict()) == g


def test_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        kl_distill([1.0, 2.0], Tensor([1.0, 2.0, 3.0]), 1.0)
