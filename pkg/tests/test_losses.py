import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confrank.exceptions import MissingTeacherError
from confrank.losses import (
    BatchLogits,
    LossWeights,
    ScoringFunction,
    SQUARE,
    ce_loss,
    combined_loss,
    cr_loss,
    kd_loss,
    kd_objective,
    rcr_loss,
    rkd_logit_loss,
    rkd_objective,
)

from . import oracles

LOG2 = math.log(2.0)

logits = st.floats(-8, 8, allow_nan=False)


def batches(min_size=1, max_size=32):
    @st.composite
    def build(draw):
        n = draw(st.integers(min_size, max_size))
        u = draw(arrays(np.float64, n, elements=logits))
        v = draw(arrays(np.float64, n, elements=logits))
        y = draw(arrays(np.int64, n, elements=st.integers(0, 1)))
        return u, v, y

    return build()


# -- cross-entropy -------------------------------------------------------------


def test_ce_at_zero_logit():
    value, grad = ce_loss(BatchLogits([0.0, 0.0], [1, 1]))
    assert value == pytest.approx(LOG2, abs=1e-15)
    np.testing.assert_allclose(grad, [-0.25, -0.25])


def test_ce_is_stable_for_large_logits():
    value, grad = ce_loss(BatchLogits([30.0, -800.0, 800.0], [1, 0, 1]))
    assert 0 <= value < 1e-12
    assert np.isfinite(grad).all()


def test_ce_matches_naive_formula(rng):
    u = rng.normal(0, 3, 200)
    y = rng.integers(0, 2, 200)
    p = 1 / (1 + np.exp(-u))
    naive = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert ce_loss(BatchLogits(u, y))[0] == pytest.approx(naive, abs=1e-9)


def test_ce_rejects_empty_batch():
    with pytest.raises(ValueError):
        ce_loss(BatchLogits([], []))


# -- point-wise ranking -------------------------------------------------------


@given(batches())
def test_cr_is_log2_when_student_equals_teacher(batch):
    u, _, y = batch
    value, _ = cr_loss(BatchLogits(u, y, u.copy()))
    assert value == pytest.approx(LOG2, abs=1e-12)


def test_cr_known_values():
    # high-precision references: log(1 + e^-1) and log(1 + e)
    assert cr_loss(BatchLogits([2.0], [1], [1.0]))[0] == pytest.approx(0.31326168751822283, abs=1e-15)
    assert cr_loss(BatchLogits([2.0], [0], [1.0]))[0] == pytest.approx(1.3132616875182228, abs=1e-15)


def test_cr_missing_teacher_names_example():
    batch = BatchLogits([0.1, 0.2], [1, 0], [0.0, np.nan], ids=[501, 502])
    with pytest.raises(MissingTeacherError, match="502"):
        cr_loss(batch)
    with pytest.raises(MissingTeacherError):
        cr_loss(BatchLogits([0.1], [1]))


@given(batches(), st.integers(0, 31), st.floats(0.01, 3))
def test_cr_decreases_as_student_moves_toward_label(batch, pick, step):
    u, v, y = batch
    i = pick % len(u)
    moved = u.copy()
    moved[i] += step if y[i] == 1 else -step
    assert cr_loss(BatchLogits(moved, y, v))[0] <= cr_loss(BatchLogits(u, y, v))[0]


@given(batches(min_size=2), batches(min_size=2))
def test_losses_are_convex_in_student_logits(a, b):
    u1, v, y = a
    u2 = np.resize(b[0], u1.shape)
    mid = 0.5 * (u1 + u2)
    for fn in (ce_loss, cr_loss, rcr_loss, rkd_logit_loss, lambda x: kd_loss(x, 2.0)):
        f = lambda u: fn(BatchLogits(u, y, v))[0]
        assert f(mid) <= 0.5 * (f(u1) + f(u2)) + 1e-9


@given(batches())
def test_teacher_is_never_modified(batch):
    u, v, y = batch
    keep = v.copy()
    for fn in (cr_loss, rcr_loss, rkd_logit_loss, kd_loss):
        fn(BatchLogits(u, y, v))
    combined_loss(BatchLogits(u, y, v), LossWeights(0.4, 0.5))
    np.testing.assert_array_equal(v, keep)


def test_scoring_functions():
    assert ScoringFunction("logistic").value(0.0) == pytest.approx(LOG2)
    assert SQUARE.value(1.0) == 0.0
    assert SQUARE.value(0.0) == 1.0
    with pytest.raises(ValueError):
        ScoringFunction("hinge")


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_scoring_functions_are_convex(a, b):
    for phi in (ScoringFunction("logistic"), SQUARE):
        mid = phi.value(0.5 * (a + b))
        assert mid <= 0.5 * (phi.value(a) + phi.value(b)) + 1e-9


# -- relational ranking ---------------------------------------------------------


def test_rcr_single_class_batch_is_zero():
    value, grad = rcr_loss(BatchLogits([0.3, 1.2, -0.4], [1, 1, 1], [0.0, 0.0, 0.0]))
    assert value == 0.0 and not grad.any()


def test_rcr_single_class_needs_no_teacher():
    value, _ = rcr_loss(BatchLogits([0.3, 1.2], [0, 0]))
    assert value == 0.0


def test_rcr_zero_margin_pair():
    value, _ = rcr_loss(BatchLogits([2.0, 0.5], [1, 0], [1.0, -0.5]))
    assert value == pytest.approx(LOG2, abs=1e-12)


def test_rcr_two_positives_four_negatives(rng):
    u, v = rng.normal(size=6), rng.normal(size=6)
    y = np.array([1, 0, 0, 1, 0, 0])
    value, grad = rcr_loss(BatchLogits(u, y, v))
    ref_value, ref_grad = oracles.rcr_double_loop(u, v, y)
    assert value == pytest.approx(ref_value, abs=1e-9)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-9)


@settings(max_examples=200)
@given(batches(max_size=64))
def test_rcr_matches_double_loop(batch):
    u, v, y = batch
    value, grad = rcr_loss(BatchLogits(u, y, v))
    ref_value, ref_grad = oracles.rcr_double_loop(u, v, y)
    assert value == pytest.approx(ref_value, abs=1e-9)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-9)


@given(batches(min_size=2), st.floats(-5, 5))
def test_rcr_ignores_a_common_shift(batch, shift):
    u, v, y = batch
    a = rcr_loss(BatchLogits(u, y, v))[0]
    b = rcr_loss(BatchLogits(u + shift, y, v))[0]
    assert a == pytest.approx(b, abs=1e-9)


# -- distillation baselines -------------------------------------------------------


@given(batches(), st.floats(0.5, 5))
def test_kd_gradient_vanishes_when_student_matches_teacher(batch, t):
    u, _, y = batch
    _, grad = kd_loss(BatchLogits(u, y, u.copy()), temperature=t)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_kd_at_half_target():
    value, _ = kd_loss(BatchLogits([0.0], [1], [0.0]), temperature=1.0)
    assert value == pytest.approx(LOG2, abs=1e-15)


def test_kd_ignores_labels(rng):
    u, v = rng.normal(size=8), rng.normal(size=8)
    a = kd_loss(BatchLogits(u, np.zeros(8), v))
    b = kd_loss(BatchLogits(u, np.ones(8), v))
    assert a[0] == b[0]


def test_kd_gradient_finite_difference(rng):
    u, v, y = rng.normal(size=9), rng.normal(size=9), rng.integers(0, 2, 9)
    _, grad = kd_loss(BatchLogits(u, y, v), 3.0)
    for i in range(9):
        e = np.zeros(9)
        e[i] = 1e-4
        num = (kd_loss(BatchLogits(u + e, y, v), 3.0)[0] - kd_loss(BatchLogits(u - e, y, v), 3.0)[0]) / 2e-4
        assert oracles.gradient_matches(grad[i], num)


def test_kd_objective_mixing():
    batch = BatchLogits([0.5, -1.0], [1, 0], [1.5, 0.2])
    ce = ce_loss(batch)
    assert kd_objective(batch, alpha=0.0)[0] == ce[0]
    np.testing.assert_array_equal(kd_objective(batch, alpha=0.0)[1], ce[1])
    mixed = kd_objective(batch, alpha=0.3, temperature=2.0)[0]
    assert mixed == pytest.approx(0.7 * ce[0] + 0.3 * kd_loss(batch, 2.0)[0], abs=1e-15)
    with pytest.raises(ValueError):
        kd_objective(batch, alpha=1.5)


def test_rkd_zero_when_equal_or_shifted(rng):
    u = rng.normal(size=10)
    y = rng.integers(0, 2, 10)
    assert rkd_logit_loss(BatchLogits(u, y, u))[0] == 0.0
    assert rkd_logit_loss(BatchLogits(u, y, u + 2.5))[0] == pytest.approx(0.0, abs=1e-12)


def test_rkd_batch_of_one_contributes_nothing():
    value, grad = rkd_logit_loss(BatchLogits([1.0], [1], [3.0]))
    assert value == 0.0 and grad.tolist() == [0.0]
    assert rkd_objective(BatchLogits([1.0], [1], [3.0]))[0] == ce_loss(BatchLogits([1.0], [1]))[0]


def test_rkd_batch_of_five(rng):
    u, v = rng.normal(size=5), rng.normal(size=5)
    value, grad = rkd_logit_loss(BatchLogits(u, np.zeros(5), v))
    ref_value, ref_grad = oracles.rkd_double_loop(u, v)
    assert value == pytest.approx(ref_value, abs=1e-9)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-9)


@settings(max_examples=200)
@given(batches(max_size=64))
def test_rkd_matches_double_loop(batch):
    u, v, y = batch
    value, grad = rkd_logit_loss(BatchLogits(u, y, v))
    ref_value, ref_grad = oracles.rkd_double_loop(u, v)
    assert value == pytest.approx(ref_value, abs=1e-9)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-9)


# -- combined objective -----------------------------------------------------------


@given(batches())
def test_zero_weights_reduce_to_cross_entropy(batch):
    u, v, y = batch
    value, grad = combined_loss(BatchLogits(u, y, v), LossWeights(0.0, 0.0))
    ce_value, ce_grad = ce_loss(BatchLogits(u, y))
    assert value == ce_value
    np.testing.assert_array_equal(grad, ce_grad)


def test_zero_weights_need_no_teacher():
    combined_loss(BatchLogits([0.1, 0.2], [1, 0]), LossWeights())


@given(batches())
def test_combined_is_the_weighted_sum(batch):
    u, v, y = batch
    b = BatchLogits(u, y, v)
    value, grad = combined_loss(b, LossWeights(0.4, 0.5))
    expected = ce_loss(b)[0] + 0.4 * cr_loss(b)[0] + 0.5 * rcr_loss(b)[0]
    assert value == pytest.approx(expected, abs=1e-12)
    expected_grad = ce_loss(b)[1] + 0.4 * cr_loss(b)[1] + 0.5 * rcr_loss(b)[1]
    np.testing.assert_allclose(grad, expected_grad, atol=1e-12)


def test_industrial_weights_accepted():
    b = BatchLogits([0.2, -0.3], [1, 0], [0.0, 0.0])
    value, _ = combined_loss(b, LossWeights(0.5, 1.0))
    assert math.isfinite(value)


@pytest.mark.parametrize("bad", [-0.1, math.inf, math.nan])
def test_weights_must_be_finite_and_non_negative(bad):
    with pytest.raises(ValueError):
        LossWeights(bad, 0.0)
