"""Independent numerical oracles: finite-difference gradient checks and density quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, jacobian_wrt_params, loss_grads, nll_loss, sq_dist_loss
from .numeric import finite_diff_grad, finite_diff_jacobian, rng_create


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / |a| on coordinates with |a| > floor."""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    sig = np.abs(analytic) > floor
    return np.abs(analytic[sig] - numeric[sig]) / np.abs(analytic[sig])


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    n_checked: int


def gradcheck_suite(dim: int = 4, n_layers: int = 4, hidden=(8, 8), seed: int = 0, h: float = 1e-5) -> list[GradCheck]:
    """Compare reverse-mode gradients with central differences on a random model."""
    rng = rng_create(seed, 0)
    model = FlowModel(dim, n_layers, hidden).randomize(rng, 0.5)
    theta0 = model.theta.copy()
    x = rng.standard_normal((6, dim))
    means = rng.standard_normal((6, dim))
    targets = rng.standard_normal((6, dim))

    def check(name, loss):
        _, grad = loss_grads(model, x, loss)

        def f(theta):
            model.set_theta(theta)
            z, ld = model.forward(x)
            return loss(z, ld)[0]

        fd = finite_diff_grad(f, theta0, h)
        model.set_theta(theta0)
        err = relative_errors(grad, fd)
        return GradCheck(name, float(err.max(initial=0.0)), int(err.size))

    out = [check("nll", nll_loss(means)), check("sq_dist", sq_dist_loss(targets))]

    worst, count = 0.0, 0
    for xi in x[:2]:
        jac = jacobian_wrt_params(model, xi)

        def g(theta, xi=xi):
            model.set_theta(theta)
            return model.forward(xi)[0]

        fd = finite_diff_jacobian(g, theta0, h)
        model.set_theta(theta0)
        err = relative_errors(jac, fd)
        worst = max(worst, float(err.max(initial=0.0)))
        count += err.size
    out.append(GradCheck("jacobian_wrt_params", worst, count))
    return out


def input_logdet_error(model: FlowModel, x: np.ndarray, h: float = 1e-5) -> float:
    """|analytic logdet - log|det J_x|| with J_x from central differences."""
    x = np.asarray(x, dtype=np.float64)
    jac = finite_diff_jacobian(lambda v: model.forward(v)[0], x, h)
    _, numeric = np.linalg.slogdet(jac)
    return abs(model.forward(x)[1] - numeric)


def integrate_density_2d(model: FlowModel, mean: np.ndarray, radius: float = 5.0, n0: int = 128, tol: float = 1e-3, max_n: int = 2048):
    """Integral of exp(logprob) over a box holding the pre-image of a latent disc.

    The box is the bounding box of f^{-1}(mean + radius * circle) (the disc's
    image is bounded by that curve), padded by 10%.  The midpoint rule is
    refined by doubling the resolution until two successive estimates agree
    to ``tol``.  Returns (integral, final resolution).
    """
    if model.dim != 2:
        raise ValueError("quadrature oracle is 2-D only")
    angles = np.linspace(0.0, 2 * np.pi, 720, endpoint=False)
    ring = np.asarray(mean) + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    edge = model.inverse(ring)
    lo, hi = edge.min(axis=0), edge.max(axis=0)
    pad = 0.1 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def midpoint(n):
        cx = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
        cy = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
        pts = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1).reshape(-1, 2)
        total = 0.0
        for chunk in np.array_split(pts, max(1, len(pts) // 65536)):
            total += np.exp(model.logprob(chunk, mean)).sum()
        return total * (hi[0] - lo[0]) * (hi[1] - lo[1]) / (n * n)

    n = n0
    prev = midpoint(n)
    while n < max_n:
        n *= 2
        cur = midpoint(n)
        if abs(cur - prev) < tol:
            return cur, n
        prev = cur
    return prev, n
