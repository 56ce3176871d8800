"""RealNVP-style affine coupling flow on flat float64 parameter vectors.

Every coupling layer keeps one half of the coordinates (mask ``b``) and
transforms the rest::

    y = b*x + (1-b) * (x * exp(s(b*x)) + t(b*x)),   s = clamp * tanh(raw_s)

Masks alternate between even and odd coordinates (layer ``l`` keeps the
coordinates ``i`` with ``(i + l) % 2 == 0``).  All parameters live in one
flat vector ``theta``; the per-layer weights are views into it, so an
optimizer only ever sees ``theta``.  Gradients come from a hand-written
batched reverse pass (``backward``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
MASK_SCHEME = "alternating-even-odd"
FORMAT_VERSION = 1

# Preset shapes: (n_layers, hidden widths).
PRESETS = {
    "small": (8, (64, 64)),
    "embedding": (8, (512, 512, 512)),
    "tiny": (4, (16, 16)),
}


class NonFiniteInputError(ValueError):
    pass


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteInputError(f"{what} contains non-finite values")


def alternating_masks(dim: int, n_layers: int) -> np.ndarray:
    idx = np.arange(dim)
    return np.stack([((idx + layer) % 2 == 0).astype(np.float64) for layer in range(n_layers)])


class FlowModel:
    """Stack of affine coupling layers with a flat parameter vector ``theta``."""

    def __init__(self, dim: int, n_layers: int = 8, hidden: Sequence[int] = (64, 64), clamp: float = 2.0):
        if dim < 2:
            raise ValueError("the coupling stack needs dim >= 2 (use ToyFlow for scalars)")
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if clamp <= 0:
            raise ValueError("clamp must be positive")
        self.dim = int(dim)
        self.n_layers = int(n_layers)
        self.hidden = tuple(int(h) for h in hidden)
        self.clamp = float(clamp)
        self.masks = alternating_masks(self.dim, self.n_layers)

        sizes = (self.dim, *self.hidden, self.dim)
        self._shapes: list[tuple[int, int]] = list(zip(sizes[:-1], sizes[1:]))
        # layout[layer][net][k] = (w_offset, b_offset, fan_in, fan_out)
        self._layout = []
        offset = 0
        for _ in range(self.n_layers):
            nets = []
            for _net in ("s", "t"):
                dense = []
                for fan_in, fan_out in self._shapes:
                    dense.append((offset, offset + fan_in * fan_out, fan_in, fan_out))
                    offset += fan_in * fan_out + fan_out
                nets.append(dense)
            self._layout.append(nets)
        self.n_params = offset
        self.theta = np.zeros(self.n_params)
        self._params = self._views(self.theta)

    # -- parameter plumbing -------------------------------------------------

    def _views(self, vec: np.ndarray):
        out = []
        for nets in self._layout:
            layer = []
            for dense in nets:
                layer.append(
                    [
                        (vec[w0:b0].reshape(fi, fo), vec[b0 : b0 + fo])
                        for w0, b0, fi, fo in dense
                    ]
                )
            out.append(layer)
        return out

    def set_theta(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        self.theta[:] = theta

    def init_params(self, rng: np.random.Generator) -> "FlowModel":
        """Random hidden layers (std 1/sqrt(fan_in)), zero final layers: the identity map."""
        self.theta[:] = 0.0
        for layer in self._params:
            for net in layer:
                for W, _b in net[:-1]:
                    W[:] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        return self

    def randomize(self, rng: np.random.Generator, scale: float = 0.3) -> "FlowModel":
        """Fill every parameter (final layers included) with N(0, scale^2 / fan_in) noise."""
        for layer in self._params:
            for net in layer:
                for W, b in net:
                    W[:] = rng.standard_normal(W.shape) * scale / np.sqrt(W.shape[0])
                    b[:] = rng.standard_normal(b.shape) * scale
        return self

    def copy(self) -> "FlowModel":
        other = FlowModel(self.dim, self.n_layers, self.hidden, self.clamp)
        other.theta[:] = self.theta
        return other

    def layer_params(self, layer: int):
        """``(s_net, t_net)`` lists of ``(W, b)`` views for one coupling layer."""
        return self._params[layer]

    # -- evaluation ---------------------------------------------------------

    @staticmethod
    def _mlp(net, h: np.ndarray, cache: list | None):
        for W, b in net[:-1]:
            h = np.tanh(h @ W + b)
            if cache is not None:
                cache.append(h)
        W, b = net[-1]
        return h @ W + b

    def _forward(self, params, x: np.ndarray, keep: bool):
        caches = [] if keep else None
        logdet = np.zeros(x.shape[0])
        for mask, (s_net, t_net) in zip(self.masks, params):
            inv = 1.0 - mask
            xm = x * mask
            hs: list | None = [] if keep else None
            ht: list | None = [] if keep else None
            th = np.tanh(self._mlp(s_net, xm, hs))
            s = self.clamp * th
            t = self._mlp(t_net, xm, ht)
            es = np.exp(s)
            y = xm + inv * (x * es + t)
            logdet += (inv * s).sum(axis=1)
            if keep:
                caches.append((x, xm, hs, ht, th, es))
            x = y
        return x, logdet, caches

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map data to latent space.  Accepts a single D-vector or an (N, D) batch."""
        x = np.asarray(x, dtype=np.float64)
        _check_finite(x, "flow input")
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {xb.shape[-1]}")
        z, logdet, _ = self._forward(self._params, xb, keep=False)
        return (z[0], float(logdet[0])) if single else (z, logdet)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        _check_finite(z, "flow inverse input")
        single = z.ndim == 1
        y = (z[None, :] if single else z).copy()
        for mask, (s_net, t_net) in zip(self.masks[::-1], self._params[::-1]):
            ym = y * mask
            s = self.clamp * np.tanh(self._mlp(s_net, ym, None))
            t = self._mlp(t_net, ym, None)
            y = ym + (1.0 - mask) * ((y - t) * np.exp(-s))
        return y[0] if single else y

    def logprob(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray | float:
        """log N(f(x); mean, I) + log|det df/dx|.  ``mean`` broadcasts against ``x``."""
        z, logdet = self.forward(x)
        mean = np.asarray(mean, dtype=np.float64)
        _check_finite(mean, "latent mean")
        sq = np.sum((z - mean) ** 2, axis=-1)
        return -0.5 * self.dim * LOG_2PI - 0.5 * sq + logdet

    def sample(self, rng: np.random.Generator, mean: np.ndarray, n: int) -> np.ndarray:
        mean = np.asarray(mean, dtype=np.float64)
        if n < 1:
            raise ValueError("n must be >= 1")
        z = mean + rng.standard_normal((n, self.dim))
        return self.inverse(z)

    # -- gradients ----------------------------------------------------------

    def forward_with_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        _check_finite(x, "flow input")
        return self._forward(self._params, np.atleast_2d(x), keep=True)

    def backward(self, caches, gz: np.ndarray, glogdet: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reverse pass.  Returns (d loss / d theta, d loss / d x) for cotangents on (z, logdet)."""
        grad = np.zeros(self.n_params)
        gparams = self._views(grad)
        gy = np.array(gz, dtype=np.float64, copy=True)
        gld = np.asarray(glogdet, dtype=np.float64)[:, None]
        for layer in range(self.n_layers - 1, -1, -1):
            mask = self.masks[layer]
            inv = 1.0 - mask
            x, xm, hs, ht, th, es = caches[layer]
            s_net, t_net = self._params[layer]
            gs_net, gt_net = gparams[layer]
            g_s = inv * (gy * x * es + gld)
            g_raw = g_s * self.clamp * (1.0 - th * th)
            g_t = inv * gy
            gx = mask * gy + inv * gy * es
            gxm = self._mlp_backward(s_net, gs_net, xm, hs, g_raw)
            gxm += self._mlp_backward(t_net, gt_net, xm, ht, g_t)
            gy = gx + mask * gxm
        return grad, gy

    @staticmethod
    def _mlp_backward(net, gnet, x_in, hidden_acts, gout):
        acts = [x_in, *hidden_acts]
        g = gout
        for k in range(len(net) - 1, -1, -1):
            W, _ = net[k]
            gW, gb = gnet[k]
            a_in = acts[k]
            gW += a_in.T @ g
            gb += g.sum(axis=0)
            g = g @ W.T
            if k > 0:
                g = g * (1.0 - a_in * a_in)
        return g

    # -- serialization ------------------------------------------------------

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "hidden": list(self.hidden),
            "clamp": self.clamp,
            "mask_scheme": MASK_SCHEME,
            "n_params": self.n_params,
        }

    @classmethod
    def from_header(cls, header: dict, theta: np.ndarray) -> "FlowModel":
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported flow format version {header.get('format_version')}")
        if header.get("mask_scheme") != MASK_SCHEME:
            raise ValueError(f"unsupported mask scheme {header.get('mask_scheme')}")
        model = cls(header["dim"], header["n_layers"], header["hidden"], header["clamp"])
        model.set_theta(theta)
        return model


def build_flow(dim: int, preset: str = "small", rng: np.random.Generator | None = None, clamp: float = 2.0) -> FlowModel:
    n_layers, hidden = PRESETS[preset]
    model = FlowModel(dim, n_layers, hidden, clamp)
    if rng is not None:
        model.init_params(rng)
    return model


# Functional wrappers ------------------------------------------------------


def flow_forward(model: FlowModel, x: np.ndarray):
    return model.forward(x)


def flow_inverse(model: FlowModel, z: np.ndarray) -> np.ndarray:
    return model.inverse(z)


def flow_logprob(model: FlowModel, x: np.ndarray, mean: np.ndarray):
    return model.logprob(x, mean)


def flow_sample(model: FlowModel, rng: np.random.Generator, mean: np.ndarray, n: int) -> np.ndarray:
    return model.sample(rng, mean, n)


# A batch loss maps (z, logdet) to (value, d value/dz, d value/dlogdet).
BatchLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def loss_grads(model: FlowModel, x: np.ndarray, loss: BatchLoss) -> tuple[float, np.ndarray]:
    """Value and exact parameter gradient of ``loss(f(x), logdet(x))`` over a batch."""
    z, logdet, caches = model.forward_with_cache(x)
    value, gz, gld = loss(z, logdet)
    grad, _ = model.backward(caches, gz, gld)
    return float(value), grad


def nll_loss(means: np.ndarray) -> BatchLoss:
    """Mean negative log-density under N(means_i, I) plus log-det, per row."""

    def loss(z, logdet):
        n, d = z.shape
        diff = z - means
        value = np.mean(0.5 * d * LOG_2PI + 0.5 * np.sum(diff * diff, axis=1) - logdet)
        return value, diff / n, np.full(n, -1.0 / n)

    return loss


def sq_dist_loss(targets: np.ndarray) -> BatchLoss:
    """Mean over rows of ||z_i - target_i||^2; ignores the log-det."""

    def loss(z, logdet):
        n = z.shape[0]
        diff = z - targets
        return np.mean(np.sum(diff * diff, axis=1)), 2.0 * diff / n, np.zeros(n)

    return loss


def jacobian_wrt_params(model: FlowModel, x: np.ndarray) -> np.ndarray:
    """D x P Jacobian of f_theta(x) with respect to theta (one reverse pass per output)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, _, caches = model.forward_with_cache(x)
    rows = np.empty((model.dim, model.n_params))
    zero = np.zeros(1)
    for d in range(model.dim):
        gz = np.zeros((1, model.dim))
        gz[0, d] = 1.0
        rows[d], _ = model.backward(caches, gz, zero)
    return rows


def header_json(model: FlowModel) -> str:
    return json.dumps(model.header(), sort_keys=True)
