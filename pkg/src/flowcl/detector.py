"""Task-change and recurrence detection by typicality tests on batch statistics.

For a batch ``B`` scored against task ``t``:

* ``S1`` = sum of log p_X(x | y, t)   (data log-likelihood)
* ``S2`` = sum of log p_Z(f(x) | y, t) (latent log-likelihood)
* ``S3`` = S1 - S2                    (summed log-determinant)

Each task owns a window of its last ``window`` batch statistics.  A batch
is atypical for a task when any enabled statistic lies more than
``sensitivity`` window standard deviations from the window mean.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from .flow import LOG_2PI, FlowModel
from .mixture import TaskRegistry

STATS = ("S1", "S2", "S3")


@dataclass(frozen=True)
class Decision:
    kind: str  # "stay" | "switch" | "new"
    task: int | None = None  # target task for "switch"

    def __str__(self) -> str:
        if self.kind == "switch":
            return f"Switch({self.task})"
        return {"stay": "Stay", "new": "NewTask"}[self.kind]


STAY = Decision("stay")
NEW_TASK = Decision("new")


def switch(task: int) -> Decision:
    return Decision("switch", task)


@dataclass(frozen=True)
class DetectorConfig:
    sensitivity: float = 5.0
    window: int = 100
    warmup: int = 20
    cooldown: int = 20
    stats: tuple[str, ...] = ("S1",)

    def __post_init__(self):
        if not self.sensitivity >= 0:
            raise ValueError("sensitivity must be non-negative")
        if self.window < 2:
            raise ValueError("window must hold at least 2 batches")
        if not 2 <= self.warmup <= self.window:
            raise ValueError("warmup must be between 2 and the window length")
        if self.cooldown < 0:
            raise ValueError("cooldown must be non-negative")
        bad = set(self.stats) - set(STATS)
        if bad or not self.stats:
            raise ValueError(f"stats must be a non-empty subset of {STATS}, got {self.stats}")


def batch_stats(model: FlowModel, registry: TaskRegistry, x: np.ndarray, y: np.ndarray, task: int) -> np.ndarray:
    """(S1, S2, S3) for a labelled batch scored against ``task``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    means = registry.lookup(np.asarray(y), np.full(len(x), task))
    z, logdet = model.forward(x)
    s2 = float(np.sum(-0.5 * model.dim * LOG_2PI - 0.5 * np.sum((z - means) ** 2, axis=1)))
    s3 = float(np.sum(logdet))
    return np.array([s2 + s3, s2, s3])


class StatWindow:
    """Ring buffers of the last ``length`` values of S1, S2, S3."""

    def __init__(self, length: int):
        self.length = length
        self._buf: deque[np.ndarray] = deque(maxlen=length)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, stats: np.ndarray) -> None:
        self._buf.append(np.array(stats, dtype=np.float64))

    def values(self) -> np.ndarray:
        if not self._buf:
            return np.zeros((0, 3))
        return np.stack(self._buf)

    def mean(self) -> np.ndarray:
        return self.values().mean(axis=0)

    def std(self) -> np.ndarray:
        """Sample std, floored at 1e-6 |mean| + 1e-12."""
        v = self.values()
        mu = v.mean(axis=0)
        sd = v.std(axis=0, ddof=1) if len(v) > 1 else np.zeros(3)
        return np.maximum(sd, 1e-6 * np.abs(mu) + 1e-12)

    def copy(self) -> "StatWindow":
        other = StatWindow(self.length)
        other._buf = deque((v.copy() for v in self._buf), maxlen=self.length)
        return other


@dataclass
class DetectorEvent:
    batch: int
    task: int
    decision: str
    stats: dict  # task -> [S1, S2, S3]
    window_mean: dict  # task -> [..]
    window_std: dict

    def as_row(self) -> dict:
        return {
            "batch": self.batch,
            "current_task": self.task,
            "decision": self.decision,
            "stats": json.dumps(self.stats),
            "window_mean": json.dumps(self.window_mean),
            "window_std": json.dumps(self.window_std),
        }


class Detector(Protocol):
    """Anything the trainer can ask for a decision on the next batch."""

    current: int

    def update_and_check(self, batch_index: int, model: FlowModel, registry: TaskRegistry, x, y) -> Decision: ...

    def task_created(self, task: int) -> None: ...


class TypicalityDetector:
    """Stateful detector.  The trainer calls ``update_and_check`` before training on each batch."""

    def __init__(self, config: DetectorConfig | None = None):
        self.config = config or DetectorConfig()
        self._idx = [STATS.index(s) for s in self.config.stats]
        self.windows: dict[int, StatWindow] = {}
        self.current: int | None = None
        self._cooldown = 0
        self.events: list[DetectorEvent] = []

    def task_created(self, task: int) -> None:
        """Register a freshly spawned task and make it current with an empty window."""
        self.windows[task] = StatWindow(self.config.window)
        self.current = task
        self._cooldown = self.config.cooldown

    def _typical(self, stats: np.ndarray, window: StatWindow) -> bool:
        mu, sd = window.mean(), window.std()
        dev = np.abs(stats - mu)[self._idx]
        return bool(np.all(dev <= self.config.sensitivity * sd[self._idx]))

    def _log(self, batch, decision, stats, windows):
        self.events.append(
            DetectorEvent(
                batch=batch,
                task=self.current,
                decision=str(decision),
                stats={str(t): s.tolist() for t, s in stats.items()},
                window_mean={str(t): w.mean().tolist() for t, w in windows.items() if len(w)},
                window_std={str(t): w.std().tolist() for t, w in windows.items() if len(w)},
            )
        )

    def update_and_check(self, batch_index: int, model: FlowModel, registry: TaskRegistry, x, y) -> Decision:
        if self.current is None:
            raise RuntimeError("no current task; call task_created first")
        live = self.windows[self.current]
        stats = batch_stats(model, registry, x, y, self.current)
        if self._cooldown > 0 or len(live) < self.config.warmup or self._typical(stats, live):
            self._cooldown = max(0, self._cooldown - 1)
            self._log(batch_index, STAY, {self.current: stats}, {self.current: live})
            live.push(stats)
            return STAY

        all_stats = {self.current: stats}
        candidates = []
        for task, window in self.windows.items():
            if task == self.current or len(window) < self.config.warmup:
                continue
            s = batch_stats(model, registry, x, y, task)
            all_stats[task] = s
            if self._typical(s, window):
                candidates.append((s[0], task))
        if candidates:
            best = max(candidates, key=lambda c: (c[0], -c[1]))[1]
            decision = switch(best)
        else:
            decision = NEW_TASK
        self._log(batch_index, decision, all_stats, {t: self.windows[t] for t in all_stats})
        if decision.kind == "switch":
            self.current = decision.task
            self._cooldown = self.config.cooldown
        # "new": the trainer spawns the task and calls task_created.
        return decision


class ScriptedDetector:
    """Emits decisions from a fixed schedule; stands in for the typicality test."""

    def __init__(self, schedule: dict[int, Decision]):
        self.schedule = dict(schedule)
        self.current: int | None = None
        self.events: list[DetectorEvent] = []

    def task_created(self, task: int) -> None:
        self.current = task

    def update_and_check(self, batch_index, model, registry, x, y) -> Decision:
        decision = self.schedule.get(batch_index, STAY)
        if decision.kind != "stay":
            self.events.append(DetectorEvent(batch_index, self.current, str(decision), {}, {}, {}))
            if decision.kind == "switch":
                self.current = decision.task
        return decision


def write_events(path, events: Iterable[DetectorEvent]) -> None:
    from .io import atomic_writer

    rows = [e.as_row() for e in events]
    fields = ["batch", "current_task", "decision", "stats", "window_mean", "window_std"]
    with atomic_writer(path) as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
