import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcl.numeric import (
    AdamState,
    adam_step,
    finite_diff_grad,
    finite_diff_jacobian,
    rng_create,
    sample_standard_normal,
)


def test_rng_same_seed_same_stream():
    a = rng_create(42, 0).random(100)
    b = rng_create(42, 0).random(100)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    assert rng_create(42, 0).random() != rng_create(42, 1).random()


def test_rng_normal_mean():
    x = sample_standard_normal(rng_create(42, 0), 100_000)
    assert abs(x.mean()) < 0.02


def test_rng_rejects_bad_seed():
    with pytest.raises(ValueError):
        rng_create(-1, 0)
    with pytest.raises(ValueError):
        rng_create(2**64, 0)


def test_sample_variance_single_draws():
    rng = rng_create(7, 0)
    x = np.array([sample_standard_normal(rng, 1)[0] for _ in range(100_000)])
    assert 0.97 <= x.var(ddof=1) <= 1.03


def test_sample_empty_and_reproducible():
    assert sample_standard_normal(rng_create(1), 0).shape == (0,)
    assert sample_standard_normal(rng_create(1), 1)[0] == sample_standard_normal(rng_create(1), 1)[0]


def test_adam_zero_grad_fixed_point():
    p = np.array([1.0, -2.0, 3.0])
    new, state = adam_step(p, np.zeros(3), AdamState.zeros(3))
    assert np.array_equal(new, p)
    assert state.step == 1


def test_adam_first_step_hand_value():
    new, _ = adam_step(np.array([0.0]), np.array([1.0]), AdamState.zeros(1, lr=0.1))
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert abs(new[0] - (-0.1)) < 1e-6


def test_adam_pure():
    p, g, s = np.array([0.5, 1.5]), np.array([0.1, -0.3]), AdamState.zeros(2, lr=0.01)
    a = adam_step(p, g, s)
    b = adam_step(p, g, s)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1].m, b[1].m) and np.array_equal(a[1].v, b[1].v) and a[1].step == b[1].step
    assert np.array_equal(p, [0.5, 1.5])


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2))


def test_adam_weight_decay_shrinks():
    new, _ = adam_step(np.array([2.0]), np.array([0.0]), AdamState.zeros(1, lr=0.1, weight_decay=0.5))
    assert new[0] < 2.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.integers(1, 4))
def test_adam_step_bounded_by_lr(grad, steps):
    # Bias-corrected Adam moves each coordinate by at most about lr per step.
    g = np.array(grad)
    p, s = np.zeros_like(g), AdamState.zeros(len(g), lr=0.01)
    for _ in range(steps):
        p, s = adam_step(p, g, s)
    assert np.all(np.abs(p) <= 0.01 * steps * (1 + 1e-6))


def test_fd_grad_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_grad_constant():
    assert np.array_equal(finite_diff_grad(lambda x: 4.0, np.ones(3)), np.zeros(3))


def test_fd_grad_norm():
    g = finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0]), 1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-7)


def test_fd_jacobian_linear():
    A = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    J = finite_diff_jacobian(lambda x: A @ x, np.array([0.3, -0.7]))
    assert np.allclose(J, A, atol=1e-9)
