"""Sequential training over a task stream with optional forgetting countermeasures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric
from .data import SequenceSpec, TaskDataset
from .detector import Decision, DetectorConfig, TypicalityDetector
from .flow import FlowModel, loss_grads, nll_loss
from .metrics import AccuracyMatrix, accuracy
from .mixture import TaskRegistry
from .numeric import AdamState, adam_step, rng_create
from .replay import Snapshot, draw_replay, fr_loss_grads, gr_loss_grads, take_snapshot

log = logging.getLogger(__name__)

METHODS = ("none", "gr", "fr", "er", "mtl")
MODES = ("task-aware", "task-agnostic")
STREAM_BUFFER = 6


class NumericalFailure(RuntimeError):
    """Raised on a non-finite loss.  ``result`` holds the state from the last good step."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainerConfig:
    mode: str = "task-aware"
    method: str = "none"
    alpha: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    er_capacity: int = 1000
    flow_layers: int = 8
    flow_hidden: tuple[int, ...] = (64, 64)
    clamp: float = 2.0
    mean_scale: float = 1.0
    min_separation: float = 1.0
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.method == "mtl" and self.mode != "task-aware":
            raise ValueError("mtl needs task labels for past data; use task-aware mode")
        self.flow_hidden = tuple(self.flow_hidden)


class ERBuffer:
    """Per-task reservoir of at most ``capacity`` (x, y) pairs."""

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator):
        self.capacity = capacity
        self.dim = dim
        self.rng = rng
        self._x: dict[int, np.ndarray] = {}
        self._y: dict[int, np.ndarray] = {}
        self._size: dict[int, int] = {}
        self._seen: dict[int, int] = {}

    def tasks(self) -> list[int]:
        return [t for t in self._x if self._size[t] > 0]

    def size(self, task: int) -> int:
        return self._size.get(task, 0)

    def add(self, task: int, x: np.ndarray, y: np.ndarray) -> None:
        if task not in self._x:
            self._x[task] = np.empty((self.capacity, self.dim))
            self._y[task] = np.empty(self.capacity, dtype=int)
            self._size[task] = 0
            self._seen[task] = 0
        for xi, yi in zip(x, y):
            n = self._seen[task]
            if n < self.capacity:
                slot = n
                self._size[task] += 1
            else:
                slot = int(self.rng.integers(0, n + 1))
            if slot < self.capacity:
                self._x[task][slot] = xi
                self._y[task][slot] = yi
            self._seen[task] = n + 1

    def contents(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.size(task)
        return self._x[task][:n], self._y[task][:n]

    def sample(self, task: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        size = self.size(task)
        idx = self.rng.choice(size, size=n, replace=n > size)
        return self._x[task][idx], self._y[task][idx]


@dataclass
class Transition:
    batch: int
    kind: str  # "new" | "switch"
    task: int  # registry task now current
    truth: int  # ground-truth task index active at that batch
    covered: tuple[int, ...]  # snapshot coverage ((): no snapshot)


@dataclass
class TrainResult:
    model: FlowModel
    registry: TaskRegistry
    acc: AccuracyMatrix
    transitions: list[Transition]
    losses: list[dict]
    detector_events: list
    creations: list[tuple[int, int]]  # (registry task, ground-truth task)
    task_order: list[int]  # ground-truth task per accuracy row


class TrainState:
    """Everything mutated by training: model, optimizer, registry, snapshot, buffers."""

    def __init__(self, config: TrainerConfig, dim: int, n_classes: int, detector=None):
        self.config = config
        seed = config.seed
        self.model = FlowModel(dim, config.flow_layers, config.flow_hidden, config.clamp)
        self.model.init_params(rng_create(seed, numeric.STREAM_INIT))
        self.registry = TaskRegistry(n_classes, dim, config.mean_scale, config.min_separation)
        self.adam = AdamState.zeros(
            self.model.n_params,
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
        self.rng_means = rng_create(seed, numeric.STREAM_MEANS)
        self.rng_replay = rng_create(seed, numeric.STREAM_REPLAY)
        self.rng_shuffle = rng_create(seed, numeric.STREAM_SHUFFLE)
        self.buffer = ERBuffer(config.er_capacity, dim, rng_create(seed, STREAM_BUFFER))
        self.snapshot: Snapshot | None = None
        self.current: int | None = None
        self.detector = detector
        if detector is None and config.mode == "task-agnostic":
            self.detector = TypicalityDetector(config.detector)
        # MTL: registry task -> training data of that task.
        self.past_data: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    # -- transitions ----------------------------------------------------------

    def _resnapshot(self, batch: int) -> tuple[int, ...]:
        covered = tuple(self.registry.task_ids)
        if covered:
            self.snapshot = take_snapshot(self.model, self.registry, covered, created_at=batch)
        return covered

    def new_task(self, batch: int) -> tuple[int, tuple[int, ...]]:
        covered = self._resnapshot(batch)
        task = self.registry.spawn_task(self.rng_means)
        self.current = task
        if self.detector is not None:
            self.detector.task_created(task)
        return task, covered

    def switch_task(self, task: int, batch: int) -> tuple[int, ...]:
        covered = self._resnapshot(batch)
        self.current = task
        return covered

    # -- one optimisation step --------------------------------------------------

    def past_tasks(self) -> list[int]:
        return [t for t in self.registry.task_ids if t != self.current]

    def train_step(self, x: np.ndarray, y: np.ndarray, replay=None) -> dict:
        """One Adam step on NLL(batch) + method term.  ``replay`` pins the replay batch."""
        cfg = self.config
        n = len(y)
        ts = np.full(n, self.current)
        extra = 0.0
        extra_grad = None

        if cfg.method in ("er", "mtl"):
            xs, ys, tss = [x], [y], [ts]
            for t in self.past_tasks():
                if cfg.method == "er":
                    if self.buffer.size(t) == 0:
                        continue
                    bx, by = self.buffer.sample(t, n)
                else:
                    px, py = self.past_data[t]
                    idx = self.rng_shuffle.choice(len(py), size=n, replace=n > len(py))
                    bx, by = px[idx], py[idx]
                xs.append(bx), ys.append(by), tss.append(np.full(len(by), t))
            x, y, ts = np.concatenate(xs), np.concatenate(ys), np.concatenate(tss)

        nll, grad = loss_grads(self.model, x, nll_loss(self.registry.lookup(y, ts)))
        if self.snapshot is not None and cfg.method in ("gr", "fr"):
            if replay is None:
                replay = draw_replay(self.snapshot, self.rng_replay, cfg.batch_size)
            if cfg.method == "gr":
                extra, extra_grad = gr_loss_grads(self.model, self.registry, replay)
            else:
                extra, extra_grad = fr_loss_grads(self.model, self.snapshot, replay)
                extra *= cfg.alpha
                extra_grad *= cfg.alpha
        total = nll + extra
        if not (np.isfinite(total) and np.all(np.isfinite(grad)) and (extra_grad is None or np.all(np.isfinite(extra_grad)))):
            raise FloatingPointError(f"non-finite loss at step {self.step_count}: nll={nll}, extra={extra}")
        if extra_grad is not None:
            grad = grad + extra_grad
        new_theta, self.adam = adam_step(self.model.theta, grad, self.adam)
        self.model.set_theta(new_theta)
        self.step_count += 1
        return {"nll": nll, "extra": extra, "total": total}


def build_stream(tasks: Sequence[TaskDataset], sequence: SequenceSpec | None = None):
    """Segments ``(ground_truth_index, dataset)``; default is each task once in order."""
    order = sequence.order if sequence is not None else tuple(range(len(tasks)))
    if sequence is not None:
        sequence.validate(len(tasks))
    return [(i, tasks[i]) for i in order]


def train_sequence(
    config: TrainerConfig,
    stream: Sequence[tuple[int, TaskDataset]],
    detector=None,
    loss_every: int = 1,
    segment_callback=None,
) -> TrainResult:
    """Train on the stream segment by segment and fill the accuracy matrix.

    In task-aware mode transitions happen at segment boundaries.  In
    task-agnostic mode the detector (a ``TypicalityDetector`` unless one is
    injected) decides before every batch.  Ground-truth task labels are used
    for evaluation and bookkeeping only.  ``segment_callback(seg, partial)``
    runs at every segment boundary before the next segment starts.
    """
    if not stream:
        raise ValueError("empty task stream")
    dims = {ds.dim for _, ds in stream}
    ks = {ds.n_classes for _, ds in stream}
    if len(dims) != 1 or len(ks) != 1:
        raise ValueError("all tasks must share input dimension and class count")
    state = TrainState(config, dims.pop(), ks.pop(), detector)
    agnostic = config.mode == "task-agnostic"

    task_order: list[int] = []  # distinct ground-truth tasks, first-appearance order
    for gt, _ in stream:
        if gt not in task_order:
            task_order.append(gt)
    row = {gt: i for i, gt in enumerate(task_order)}
    tests = {gt: ds for gt, ds in stream}
    acc = AccuracyMatrix(len(task_order), len(stream))
    transitions: list[Transition] = []
    losses: list[dict] = []
    creations: list[tuple[int, int]] = []
    gt_to_task: dict[int, int] = {}

    def result():
        return TrainResult(
            state.model,
            state.registry,
            acc,
            transitions,
            losses,
            list(getattr(state.detector, "events", [])),
            creations,
            task_order,
        )

    batch_index = 0
    for seg, (gt, ds) in enumerate(stream):
        if seg > 0 and segment_callback is not None:
            segment_callback(seg, result())
        # Task-aware transitions (and the very first task in either mode).
        if seg == 0 or not agnostic:
            if gt in gt_to_task and seg > 0:
                covered = state.switch_task(gt_to_task[gt], batch_index)
                transitions.append(Transition(batch_index, "switch", state.current, gt, covered))
            elif seg == 0 or gt not in gt_to_task:
                task, covered = state.new_task(batch_index)
                gt_to_task[gt] = task
                creations.append((task, gt))
                if seg > 0:
                    transitions.append(Transition(batch_index, "new", task, gt, covered))

        n = len(ds.y_train)
        n_batches = n // config.batch_size
        if n_batches == 0:
            raise ValueError(f"task {ds.name} has fewer examples than one batch")
        for epoch in range(config.epochs):
            perm = state.rng_shuffle.permutation(n)
            for b in range(n_batches):
                idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
                xb, yb = ds.x_train[idx], ds.y_train[idx]
                if agnostic and batch_index > 0:
                    decision: Decision = state.detector.update_and_check(
                        batch_index, state.model, state.registry, xb, yb
                    )
                    if decision.kind == "new":
                        task, covered = state.new_task(batch_index)
                        creations.append((task, gt))
                        gt_to_task.setdefault(gt, task)
                        transitions.append(Transition(batch_index, "new", task, gt, covered))
                    elif decision.kind == "switch":
                        covered = state.switch_task(decision.task, batch_index)
                        transitions.append(Transition(batch_index, "switch", decision.task, gt, covered))
                if config.method == "er" and epoch == 0:
                    state.buffer.add(state.current, xb, yb)
                try:
                    parts = state.train_step(xb, yb)
                except FloatingPointError as exc:
                    raise NumericalFailure(str(exc), result()) from exc
                if batch_index % loss_every == 0:
                    losses.append({"step": batch_index, "segment": seg, "task": state.current, **parts})
                batch_index += 1
        if config.method == "mtl":
            prev = state.past_data.get(state.current)
            if prev is None:
                state.past_data[state.current] = (ds.x_train, ds.y_train)
            else:
                state.past_data[state.current] = (
                    np.concatenate([prev[0], ds.x_train]),
                    np.concatenate([prev[1], ds.y_train]),
                )

        acc.learned_at[row[gt]] = seg
        for g in task_order:
            if any(s_gt == g for s_gt, _ in stream[: seg + 1]):
                t_ds = tests[g]
                acc.set(row[g], seg, accuracy(state.model, state.registry, t_ds.x_test, t_ds.y_test))
        log.info("segment %d (task %s) done after %d steps", seg + 1, ds.name, batch_index)

    return result()


def snapshot_schedule(transitions: Sequence[Transition]) -> list[tuple[int, tuple[int, ...]]]:
    """(batch, covered tasks) for every snapshot taken; each one replaces the previous."""
    return [(t.batch, t.covered) for t in transitions if t.covered]
