"""Numerical probes of the FR/GR analysis: scalar toy flow, Gauss-Newton curvature, bound probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, jacobian_wrt_params
from .mixture import TaskRegistry
from .replay import Snapshot


@dataclass(frozen=True)
class ToyFlow:
    """f(theta, x) = theta * x on scalars."""

    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.theta * x, np.full(np.shape(x)[:1] if np.ndim(x) else (), np.log(self.theta))

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) / self.theta

    def jacobian_wrt_params(self, x) -> np.ndarray:
        return np.array([[float(x)]])


def _check_scales(theta: float, gamma: float) -> None:
    if not (theta > 0 and gamma > 0):
        raise ValueError(f"theta and gamma must be positive, got {theta}, {gamma}")


def toy_fr_loss(theta: float, gamma: float, zs: np.ndarray) -> float:
    """mean (theta/gamma z - z)^2 = (theta/gamma - 1)^2 mean(z^2)."""
    _check_scales(theta, gamma)
    zs = np.asarray(zs, dtype=np.float64)
    return float(np.mean((theta / gamma * zs - zs) ** 2))


def toy_gr_loss(theta: float, gamma: float, zs: np.ndarray) -> float:
    """mean 1/2 (theta/gamma z)^2 - log theta (Gaussian normaliser dropped)."""
    _check_scales(theta, gamma)
    zs = np.asarray(zs, dtype=np.float64)
    return float(np.mean(0.5 * (theta / gamma * zs) ** 2) - np.log(theta))


def toy_losses_table(gamma: float, thetas, zs) -> list[tuple[float, float, float]]:
    return [(float(t), toy_fr_loss(t, gamma, zs), toy_gr_loss(t, gamma, zs)) for t in thetas]


def embedded_toy_flow(theta: float, clamp: float = 2.0) -> FlowModel:
    """One-layer D=2 coupling flow computing (x0, theta * x1).

    Coordinate 0 is passed through untouched; the scale net's final bias is
    set so that the clamped log-scale is exactly ``log theta``.
    """
    if abs(np.log(theta)) >= clamp:
        raise ValueError(f"|log theta| must be below the clamp bound {clamp}")
    model = FlowModel(2, n_layers=1, hidden=(4,), clamp=clamp)
    s_net, _ = model.layer_params(0)
    _, b_last = s_net[-1]
    b_last[1] = np.arctanh(np.log(theta) / clamp)
    return model


def curvature_matrix(model, xs: np.ndarray) -> np.ndarray:
    """(1/J) sum_j J_j^T J_j over parameter Jacobians of the flow output."""
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        raise ValueError("need at least one sample")
    acc = None
    for x in xs:
        jac = model.jacobian_wrt_params(x) if isinstance(model, ToyFlow) else jacobian_wrt_params(model, x)
        term = jac.T @ jac
        acc = term if acc is None else acc + term
    g = acc / len(xs)
    return 0.5 * (g + g.T)


def quadratic_check(model: FlowModel, xs: np.ndarray, delta: np.ndarray, curvature: np.ndarray | None = None):
    """(actual, predicted) functional change for the parameter step ``delta``.

    actual    = mean_j ||f_{theta+delta}(x_j) - f_theta(x_j)||^2
    predicted = delta^T G delta
    """
    xs = np.asarray(xs, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    g = curvature_matrix(model, xs) if curvature is None else curvature
    base = model.theta.copy()
    z0, _ = model.forward(xs)
    try:
        model.set_theta(base + delta)
        z1, _ = model.forward(xs)
    finally:
        model.set_theta(base)
    actual = float(np.mean(np.sum((z1 - z0) ** 2, axis=1)))
    predicted = float(delta @ g @ delta)
    return actual, predicted


@dataclass(frozen=True)
class BoundProbe:
    gr_terms: np.ndarray
    fr_terms: np.ndarray

    @property
    def gr_mean(self) -> float:
        return float(np.mean(self.gr_terms))

    @property
    def fr_mean(self) -> float:
        return float(np.mean(self.fr_terms))

    @property
    def fr_minus_gr_sign(self) -> int:
        return int(np.sign(self.fr_mean - self.gr_mean))

    def rows(self):
        return [(i, float(g), float(f)) for i, (g, f) in enumerate(zip(self.gr_terms, self.fr_terms))]


def bound_probe(
    model: FlowModel,
    snapshot: Snapshot,
    registry: TaskRegistry,
    zs: np.ndarray,
    ys: np.ndarray,
    ts: np.ndarray,
) -> BoundProbe:
    """Per-sample squared-distance terms comparing the GR and FR views (unit latent variance).

    gr_term = ||f(x) - mu||^2 - ||z - mu||^2 and fr_term = ||f(x) - z||^2 with
    x the snapshot pre-image of z.  Diagnostic only: no ordering is implied
    sample by sample.
    """
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    means = registry.lookup(ys, ts)
    snapshot.registry.lookup(ys, ts)  # raises if the snapshot lacks the pair
    xs = snapshot.model.inverse(zs)
    fz, _ = model.forward(xs)
    gr = np.sum((fz - means) ** 2, axis=1) - np.sum((zs - means) ** 2, axis=1)
    fr = np.sum((fz - zs) ** 2, axis=1)
    return BoundProbe(gr, fr)
