import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiogan.nn import Parameter
from angiogan.optim import Adam, AdamState, adam_step
from angiogan.tensor import Tensor


def scalar_adam(p, grad_fn, steps, lr=0.0002, b1=0.5, b2=0.999, eps=1e-8):
    """Hand-rolled scalar recurrence mirroring float32 storage of p, m and v."""
    f32 = np.float32
    p, m, v = f32(p), f32(0.0), f32(0.0)
    for t in range(1, steps + 1):
        g = f32(grad_fn(p))
        m = f32(b1 * m + (1 - b1) * g)
        v = f32(b2 * v + (1 - b2) * g * g)
        p = f32(p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
    return float(p)


def test_quadratic_matches_scalar_recurrence():
    p = Parameter(np.array([1.0]))
    state = AdamState()
    for _ in range(10):
        adam_step([p], [p.data.copy()], state)  # d/dp (p^2 / 2) = p
    assert abs(p.data[0] - scalar_adam(1.0, lambda x: x, 10)) <= 1e-7
    assert state.t == 10


@given(st.floats(1e-3, 1e3), st.booleans())
def test_first_step_is_about_lr_times_sign(g, positive):
    g = g if positive else -g
    p = Parameter(np.array([0.5]))
    adam_step([p], [np.array([g], np.float32)], AdamState(lr=0.0002))
    step = 0.5 - float(p.data[0])
    assert np.isclose(step, 0.0002 * np.sign(g), rtol=1e-3)


def test_zero_gradient_leaves_parameter_but_counts_step():
    p = Parameter(np.array([0.25, -1.0]))
    before = p.data.copy()
    state = AdamState()
    adam_step([p], [None], state)
    assert np.array_equal(p.data, before) and state.t == 1
    assert state.m[0].shape == p.shape and state.v[0].shape == p.shape


def test_shape_mismatch_is_rejected():
    p = Parameter(np.zeros(3))
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], AdamState())


def test_frozen_parameters_are_untouched():
    p = Parameter(np.ones(4))
    opt = Adam([p])
    p.grad = np.ones(4, np.float32)
    p.requires_grad = False
    opt.step()
    assert np.array_equal(p.data, np.ones(4)) and opt.state.t == 0
    assert np.array_equal(opt.state.m[0], np.zeros(4))


def test_adam_wrapper_uses_accumulated_grads():
    p = Parameter(np.ones(2))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0, -1.0], np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, 1.1], rtol=1e-5)
    opt.zero_grad()
    assert p.grad is None


def test_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (0.0002, 0.5, 0.999, 1e-8)
