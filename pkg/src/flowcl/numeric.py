"""Random streams, Adam, and finite differences.

Random numbers come from numpy's PCG64 bit generator seeded through a
``SeedSequence(seed, spawn_key=(stream_label,))``.  Distinct labels give
independent, reproducible sub-streams; the stream position is the PCG64
128-bit counter exposed by ``rng.bit_generator.state``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

# Sub-stream labels.  Never reuse a label for a different purpose.
STREAM_DATA = 0
STREAM_MEANS = 1
STREAM_REPLAY = 2
STREAM_SHUFFLE = 3
STREAM_INIT = 4
STREAM_PROBE = 5


def rng_create(seed: int, stream_label: int = 0) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=(int(stream_label),))
    return np.random.Generator(np.random.PCG64(ss))


def sample_standard_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    return rng.standard_normal(n)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros(cls, n_params: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update with coupled (L2) weight decay.

    Pure: neither ``params`` nor ``state`` is modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    g = grads + state.weight_decay * params if state.weight_decay else grads
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian ``J[i, j] = d f_i / d x_j`` of a vector function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    cols = []
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[j] = orig - h
        fm = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[j] = orig
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=1)
