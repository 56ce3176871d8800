"""Canned experiments used by the CLI: two moons, scripted detection, stationary streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric
from .data import SequenceSpec, TaskDataset, gen_gaussian_tasks, gen_two_moons
from .detector import NEW_TASK, Decision, DetectorConfig, ScriptedDetector, TypicalityDetector, switch
from .numeric import rng_create
from .replay import ReplayBatch, draw_replay
from .trainer import TrainerConfig, TrainState, build_stream


def _train_epochs(state: TrainState, ds: TaskDataset, epochs: int, replay: ReplayBatch | None = None) -> list[float]:
    bs = state.config.batch_size
    n = len(ds.y_train)
    losses = []
    for _ in range(epochs):
        perm = state.rng_shuffle.permutation(n)
        for b in range(n // bs):
            idx = perm[b * bs : (b + 1) * bs]
            losses.append(state.train_step(ds.x_train[idx], ds.y_train[idx], replay=replay)["total"])
    return losses


@dataclass
class MoonsResult:
    method: str
    seed: int
    replay_x: np.ndarray  # (4, 2) fixed replay points
    z_snapshot: np.ndarray  # latent positions under the snapshot
    z_final: np.ndarray  # latent positions under the final model
    ll_task1_snapshot: float  # mean held-out task-1 log-likelihood
    ll_task1_final: float
    state: TrainState

    @property
    def displacement(self) -> np.ndarray:
        return np.linalg.norm(self.z_final - self.z_snapshot, axis=1)

    @property
    def max_displacement(self) -> float:
        return float(self.displacement.max())

    @property
    def ll_deficit(self) -> float:
        return self.ll_task1_snapshot - self.ll_task1_final

    def latent_rows(self):
        return [
            (i, *self.replay_x[i], *self.z_snapshot[i], *self.z_final[i], self.displacement[i])
            for i in range(len(self.replay_x))
        ]

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "max_latent_displacement": self.max_displacement,
            "task1_loglik_snapshot": self.ll_task1_snapshot,
            "task1_loglik_final": self.ll_task1_final,
            "task1_loglik_deficit": self.ll_deficit,
        }


def run_two_moons(
    method: str,
    seed: int = 0,
    epochs: int = 100,
    n_per_moon: int = 500,
    noise: float = 0.05,
    n_replay: int = 4,
    **overrides,
) -> MoonsResult:
    """Learn the upper moon, snapshot, then the lower moon with FR or GR on fixed replay points."""
    if method not in ("fr", "gr", "none"):
        raise ValueError(f"two-moons method must be fr, gr or none, got {method!r}")
    moon1, moon2 = gen_two_moons(n_per_moon, noise, rng_create(seed, numeric.STREAM_DATA))
    config = TrainerConfig(method=method, epochs=epochs, seed=seed, **overrides)
    state = TrainState(config, dim=2, n_classes=1)
    task1, _ = state.new_task(0)
    _train_epochs(state, moon1, epochs)
    state.new_task(state.step_count)
    snap = state.snapshot
    fixed = draw_replay(snap, state.rng_replay, n_replay)
    _train_epochs(state, moon2, epochs, replay=fixed)

    mean1 = state.registry.mean(0, task1)
    ll_snap = float(np.mean(snap.model.logprob(moon1.x_test, mean1)))
    ll_final = float(np.mean(state.model.logprob(moon1.x_test, mean1)))
    z_snap, _ = snap.model.forward(fixed.x)
    z_final, _ = state.model.forward(fixed.x)
    return MoonsResult(method, seed, fixed.x, z_snap, z_final, ll_snap, ll_final, state)


def density_grid(state: TrainState, lo=(-1.5, -1.0), hi=(2.5, 1.5), n: int = 100):
    """Rows (x0, x1, task, log density) over a regular grid for external plotting."""
    g0 = np.linspace(lo[0], hi[0], n)
    g1 = np.linspace(lo[1], hi[1], n)
    pts = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    rows = []
    for t in state.registry.task_ids:
        lp = state.model.logprob(pts, state.registry.mean(0, t))
        rows.extend((float(a), float(b), t, float(v)) for (a, b), v in zip(pts, lp))
    return rows


def train_gaussian_model(seed: int = 0, epochs: int = 10, dim: int = 8, n_classes: int = 2, **overrides):
    """Single-task model plus its dataset, used by the stationary-stream and demo runs."""
    (task,) = gen_gaussian_tasks(1, n_classes, dim, 8.0, 8.0, 500, rng_create(seed, numeric.STREAM_DATA))
    config = TrainerConfig(epochs=epochs, seed=seed, **overrides)
    state = TrainState(config, dim, n_classes)
    state.new_task(0)
    _train_epochs(state, task, epochs)
    return state, task


def stationary_stream(state: TrainState, n_batches: int, detector_config: DetectorConfig | None = None, seed: int = 0):
    """Feed batches of the model's own samples (no training) to a fresh detector.

    Returns the list of non-Stay decisions as (batch, decision string).
    """
    rng = rng_create(seed, numeric.STREAM_PROBE)
    det = TypicalityDetector(detector_config)
    det.task_created(state.current)
    bs = state.config.batch_size
    k = state.registry.n_classes
    fired = []
    for b in range(n_batches):
        y = rng.integers(0, k, size=bs)
        means = state.registry.lookup(y, np.full(bs, state.current))
        x = state.model.inverse(means + rng.standard_normal(means.shape))
        d = det.update_and_check(b, state.model, state.registry, x, y)
        if d.kind != "stay":
            fired.append((b, str(d)))
            if d.kind == "new":
                det.task_created(state.current)
    return fired, det


# Synthetic domain-incremental benchmark: 5 tasks, 2 classes, 8 dimensions.
BENCHMARK = dict(n_tasks=5, n_classes=2, dim=8, class_sep=8.0, task_shift=8.0, n_per_class=500)
BENCHMARK_TRAINER = dict(epochs=10, mean_scale=3.0)


def benchmark_stream(seed: int, order=None, epochs: int = BENCHMARK_TRAINER["epochs"]):
    tasks = gen_gaussian_tasks(**BENCHMARK, rng=rng_create(seed, numeric.STREAM_DATA))
    spec = SequenceSpec(tuple(order), epochs) if order is not None else None
    return build_stream(tasks, spec)


def ground_truth_schedule(stream, batch_size: int, epochs: int) -> dict[int, Decision]:
    """Decisions a perfect detector would emit: NewTask on a task's first segment, Switch afterwards.

    Registry ids follow first appearance, exactly as in task-aware mode.
    """
    schedule = {}
    ids: dict[int, int] = {}
    batch = 0
    for seg, (gt, ds) in enumerate(stream):
        if seg > 0:
            schedule[batch] = switch(ids[gt]) if gt in ids else NEW_TASK
        ids.setdefault(gt, len(ids))
        batch += (len(ds.y_train) // batch_size) * epochs
    return schedule


def oracle_detector(stream, batch_size: int, epochs: int) -> ScriptedDetector:
    return ScriptedDetector(ground_truth_schedule(stream, batch_size, epochs))
