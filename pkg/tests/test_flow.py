import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcl.flow import (
    LOG_2PI,
    FlowModel,
    NonFiniteInputError,
    build_flow,
    flow_forward,
    flow_inverse,
    flow_logprob,
    flow_sample,
    jacobian_wrt_params,
    loss_grads,
    nll_loss,
    sq_dist_loss,
)
from flowcl.numeric import finite_diff_grad, finite_diff_jacobian, rng_create
from flowcl.oracles import input_logdet_error, integrate_density_2d, relative_errors

from conftest import random_flow


def test_identity_at_init():
    model = build_flow(3, "tiny", rng_create(0, 4))
    x = np.array([0.3, -2.0, 5.0])
    z, ld = flow_forward(model, x)
    assert np.array_equal(z, x) and ld == 0.0
    assert np.array_equal(flow_inverse(model, x), x)


def _handset_layer(log_scale, shift, clamp=2.0):
    """One D=2 layer keeping coordinate 0 and mapping x1 -> x1 * exp(log_scale) + shift."""
    model = FlowModel(2, n_layers=1, hidden=(4,), clamp=clamp)
    s_net, t_net = model.layer_params(0)
    s_net[-1][1][1] = np.arctanh(log_scale / clamp)
    t_net[-1][1][1] = shift
    return model


def test_handset_coupling_forward():
    model = _handset_layer(np.log(2.0), 3.0)
    z, ld = flow_forward(model, np.array([1.0, 1.0]))
    assert np.allclose(z, [1.0, 5.0], atol=1e-12)
    assert abs(ld - np.log(2.0)) < 1e-12


def test_handset_coupling_inverse():
    model = _handset_layer(np.log(2.0), 3.0)
    assert np.allclose(flow_inverse(model, np.array([1.0, 5.0])), [1.0, 1.0], atol=1e-12)


def test_composition_logdet_adds():
    model = random_flow(dim=3, n_layers=2, seed=3)
    x = rng_create(1).standard_normal((5, 3))
    total_z, total_ld = model.forward(x)
    first = FlowModel(3, 1, model.hidden)
    second = FlowModel(3, 2, model.hidden)
    first.set_theta(model.theta[: first.n_params])
    # A two-layer model with layer 0 reset to identity isolates layer 1.
    t2 = model.theta.copy()
    t2[: first.n_params] = 0.0
    second.set_theta(t2)
    z1, ld1 = first.forward(x)
    _, ld2 = second.forward(z1)
    assert np.allclose(ld1 + ld2, total_ld, atol=1e-12)


def test_logprob_mode_2d(identity2):
    assert abs(flow_logprob(identity2, np.array([1.0, 2.0]), np.array([1.0, 2.0])) + LOG_2PI) < 1e-12


def test_logprob_unit_offset(identity2):
    lp = flow_logprob(identity2, np.array([1.0, 0.0]), np.zeros(2))
    # 2-D version of -1/2 log 2pi - 1/2 per unit offset coordinate.
    assert abs(lp - (-LOG_2PI - 0.5)) < 1e-12


def test_sample_moments(identity2):
    s = flow_sample(identity2, rng_create(3), np.zeros(2), 10_000)
    assert np.all(np.abs(s.mean(axis=0)) < 0.05)
    assert np.all(np.abs(np.cov(s.T) - np.eye(2)) < 0.05)


def test_non_finite_rejected(identity2):
    with pytest.raises(NonFiniteInputError):
        flow_forward(identity2, np.array([np.nan, 0.0]))
    with pytest.raises(NonFiniteInputError):
        flow_inverse(identity2, np.array([np.inf, 0.0]))


def test_dim_one_rejected():
    with pytest.raises(ValueError):
        FlowModel(1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_roundtrip_property(seed, dim):
    model = random_flow(dim=dim, n_layers=3, seed=seed)
    x = rng_create(seed, 5).standard_normal((4, dim)) * 3
    assert np.max(np.abs(model.inverse(model.forward(x)[0]) - x)) < 1e-8


def test_logdet_matches_input_jacobian():
    model = random_flow(dim=2, n_layers=4, seed=11)
    for x in rng_create(2).standard_normal((5, 2)):
        assert input_logdet_error(model, x) < 1e-5


def test_density_integrates_to_one():
    model = random_flow(dim=2, n_layers=2, hidden=(8,), seed=5, scale=0.4)
    total, _ = integrate_density_2d(model, np.zeros(2), tol=5e-3, max_n=1024)
    assert abs(total - 1.0) < 0.02


def test_constant_loss_zero_grad():
    model = random_flow(seed=1)
    x = rng_create(0).standard_normal((3, 2))
    _, g = loss_grads(model, x, lambda z, ld: (5.0, np.zeros_like(z), np.zeros_like(ld)))
    assert np.array_equal(g, np.zeros(model.n_params))


def test_nll_grad_single_layer_fd():
    model = random_flow(dim=2, n_layers=1, seed=2)
    x = np.array([[0.4, -1.2]])
    means = np.array([[1.0, 0.5]])
    _, g = loss_grads(model, x, nll_loss(means))
    theta0 = model.theta.copy()

    def f(theta):
        model.set_theta(theta)
        return nll_loss(means)(*model.forward(x))[0]

    fd = finite_diff_grad(f, theta0, 1e-6)
    model.set_theta(theta0)
    assert np.max(np.abs(g - fd)) < 1e-7


def test_fr_at_minimum_zero_grad():
    model = random_flow(seed=4)
    x = rng_create(1).standard_normal((4, 2))
    targets, _ = model.forward(x)
    _, g = loss_grads(model, x, sq_dist_loss(targets))
    assert np.array_equal(g, np.zeros(model.n_params))


def test_jacobian_zero_columns_for_kept_coordinate():
    model = random_flow(dim=2, n_layers=1, seed=6)
    J = jacobian_wrt_params(model, np.array([0.3, 0.8]))
    assert J.shape == (2, model.n_params)
    # Coordinate 0 is passed through by layer 0, so nothing moves it.
    assert np.array_equal(J[0], np.zeros(model.n_params))


def test_jacobian_matches_fd():
    model = random_flow(dim=3, n_layers=2, seed=8)
    x = np.array([0.1, -0.4, 0.9])
    J = jacobian_wrt_params(model, x)
    theta0 = model.theta.copy()

    def g(theta):
        model.set_theta(theta)
        return model.forward(x)[0]

    fd = finite_diff_jacobian(g, theta0, 1e-6)
    model.set_theta(theta0)
    assert np.max(np.abs(J - fd)) < 1e-7


def test_relative_errors_floor():
    err = relative_errors(np.array([1e-12, 1.0]), np.array([0.0, 1.0 + 1e-9]))
    # Coordinates at or below the floor are skipped.
    assert err.shape == (1,) and err[0] < 1e-8


def test_header_roundtrip():
    model = random_flow(dim=3, n_layers=2, seed=9)
    clone = FlowModel.from_header(model.header(), model.theta.copy())
    x = rng_create(0).standard_normal((3, 3))
    assert np.array_equal(clone.forward(x)[0], model.forward(x)[0])
