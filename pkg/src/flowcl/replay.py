"""Single frozen snapshot, replay sampling, and the two anti-forgetting losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, loss_grads, nll_loss, sq_dist_loss
from .mixture import TaskRegistry


@dataclass(frozen=True)
class ReplayBatch:
    x: np.ndarray  # (n, D)
    y: np.ndarray  # (n,) 0-based classes
    t: np.ndarray  # (n,) task ids

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int) -> "ReplayBatch":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=int), np.zeros(0, dtype=int))


class Snapshot:
    """Frozen copy of the flow and registry taken at a task change."""

    __slots__ = ("_model", "_registry", "covered", "created_at")

    def __init__(self, model: FlowModel, registry: TaskRegistry, covered, created_at: int = -1):
        covered = tuple(int(t) for t in covered)
        if not covered:
            raise ValueError("a snapshot must cover at least one task")
        for t in covered:
            if t not in registry.task_ids:
                raise KeyError(f"covered task {t} not in registry")
        self._model = model.copy()
        self._model.theta.flags.writeable = False
        self._registry = registry.copy()
        self.covered = covered
        self.created_at = created_at

    @property
    def model(self) -> FlowModel:
        return self._model

    @property
    def registry(self) -> TaskRegistry:
        return self._registry

    @property
    def theta(self) -> np.ndarray:
        return self._model.theta


def take_snapshot(model: FlowModel, registry: TaskRegistry, covered, created_at: int = -1) -> Snapshot:
    return Snapshot(model, registry, covered, created_at)


def draw_replay(snapshot: Snapshot, rng: np.random.Generator, n_per_task: int) -> ReplayBatch:
    """Stratified over covered tasks; classes uniform; x drawn from the snapshot flow."""
    if n_per_task < 1:
        raise ValueError("n_per_task must be >= 1")
    k = snapshot.registry.n_classes
    ys = []
    ts = []
    for t in snapshot.covered:
        ys.append(rng.integers(0, k, size=n_per_task))
        ts.append(np.full(n_per_task, t))
    y = np.concatenate(ys)
    t = np.concatenate(ts)
    means = snapshot.registry.lookup(y, t)
    z = means + rng.standard_normal(means.shape)
    x = snapshot.model.inverse(z)
    return ReplayBatch(x, y, t)


def gr_loss(model: FlowModel, registry: TaskRegistry, replay: ReplayBatch) -> float:
    """Mean negative log-likelihood of replayed points under the live model."""
    if len(replay) == 0:
        raise ValueError("empty replay batch")
    means = registry.lookup(replay.y, replay.t)
    return float(-np.mean(model.logprob(replay.x, means)))


def fr_loss(model: FlowModel, snapshot: Snapshot, replay: ReplayBatch) -> float:
    """Mean squared latent displacement between the live and snapshot flows."""
    if len(replay) == 0:
        raise ValueError("empty replay batch")
    z_live, _ = model.forward(replay.x)
    z_old, _ = snapshot.model.forward(replay.x)
    return float(np.mean(np.sum((z_live - z_old) ** 2, axis=1)))


def gr_loss_grads(model: FlowModel, registry: TaskRegistry, replay: ReplayBatch) -> tuple[float, np.ndarray]:
    means = registry.lookup(replay.y, replay.t)
    return loss_grads(model, replay.x, nll_loss(means))


def fr_loss_grads(model: FlowModel, snapshot: Snapshot, replay: ReplayBatch) -> tuple[float, np.ndarray]:
    targets, _ = snapshot.model.forward(replay.x)
    return loss_grads(model, replay.x, sq_dist_loss(targets))
