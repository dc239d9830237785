import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unetseg.errors import EpochOutOfRangeError, NonFiniteGradientError, ShapeMismatchError
from unetseg.optim import AdamState, LrSchedule, adam_step, lr_at_epoch
from unetseg.tensor import Tensor


def scalar_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam written straight from the update rule; the oracle for the vectorized step."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def _quadratic(x0, lr, steps):
    p = {"x": Tensor(np.array([x0]), dtype=np.float64, requires_grad=True)}
    state = AdamState()
    for _ in range(steps):
        adam_step(p, {"x": 2 * p["x"].data}, state, lr)
    return p["x"].data[0], state


def test_zero_gradient_is_noop():
    p = {"w": Tensor(np.arange(4.0), requires_grad=True)}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(4)}, AdamState(), 0.001)
    assert np.array_equal(p["w"].data, before)


def test_first_step_moves_each_element_by_about_lr():
    p = {"w": Tensor(np.zeros(5), dtype=np.float64, requires_grad=True)}
    g = np.array([3.0, -0.5, 1e-3, -20.0, 7.0])
    adam_step(p, {"w": g}, AdamState(), 0.01)
    # t = 1: m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps)
    assert np.allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.allclose(np.abs(p["w"].data), 0.01, rtol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-6), min_size=1, max_size=10))
def test_update_opposes_gradient_sign(values):
    g = np.array(values)
    p = {"w": Tensor(np.zeros_like(g), dtype=np.float64, requires_grad=True)}
    adam_step(p, {"w": g}, AdamState(), 0.001)
    assert np.array_equal(np.sign(p["w"].data), -np.sign(g))


def test_quadratic_matches_scalar_oracle_and_descends():
    x100, state = _quadratic(5.0, 0.1, 100)
    assert state.t == 100
    assert x100 == pytest.approx(scalar_adam(5.0, lambda x: 2 * x, 0.1, 100), rel=1e-9, abs=1e-12)
    assert abs(x100) < 1
    x500, _ = _quadratic(5.0, 0.1, 500)
    assert abs(x500) < 1e-2


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((3, 4)).astype(np.float32)
    grads = [rng.standard_normal((3, 4)).astype(np.float32) for _ in range(5)]
    outs = []
    for _ in range(2):
        p = {"w": Tensor(w0.copy(), requires_grad=True)}
        state = AdamState()
        for g in grads:
            adam_step(p, {"w": g}, state, 0.001)
        outs.append(p["w"].data.tobytes())
        assert p["w"].data.dtype == np.float32
    assert outs[0] == outs[1]


def test_adam_errors_leave_state_untouched():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam_step(p, {"w": np.array([0.0, np.nan, 1.0])}, state, 0.001)
    with pytest.raises(ShapeMismatchError):
        adam_step(p, {"w": np.zeros(4)}, state, 0.001)
    with pytest.raises(ShapeMismatchError):
        adam_step(p, {}, state, 0.001)
    assert state.t == 0 and not state.m


def test_schedule_examples():
    sched = LrSchedule(total_epochs=100)
    assert lr_at_epoch(sched, 10) == 0.001
    assert lr_at_epoch(sched, 50) == 0.00075
    assert lr_at_epoch(sched, 80) == 0.0005625
    assert sched.milestones == (50, 75)
    assert lr_at_epoch(sched, 49) == 0.001 and lr_at_epoch(sched, 74) == 0.00075 and lr_at_epoch(sched, 75) == 0.0005625


def test_schedule_out_of_range():
    sched = LrSchedule(total_epochs=4)
    for e in (-1, 4, 10):
        with pytest.raises(EpochOutOfRangeError):
            lr_at_epoch(sched, e)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(4, 500))
def test_schedule_is_nonincreasing_with_two_steps(total):
    sched = LrSchedule(total_epochs=total)
    rates = [lr_at_epoch(sched, e) for e in range(total)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert sum(a != b for a, b in zip(rates, rates[1:])) == 2
    assert rates[total // 2] == 0.00075 and rates[-1] == 0.0005625
