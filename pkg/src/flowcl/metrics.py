"""Accuracy matrix and the summary metrics derived from it."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .flow import FlowModel
from .mixture import TaskRegistry, classify, classify_joint


class MetricsError(ValueError):
    pass


class AccuracyMatrix:
    """``acc[i, j]``: accuracy on task ``i`` after training segment ``j``.

    Rows are distinct ground-truth tasks in order of first appearance; columns
    are training segments.  For a stream without recurrences this is the usual
    square lower-triangular matrix.  ``learned_at[i]`` is the last segment in
    which task ``i`` was trained and plays the role of ``a_{i,i}`` in forgetting.
    Missing cells are NaN and are never treated as zero.
    """

    def __init__(self, n_tasks: int, n_segments: int | None = None):
        self.n_tasks = n_tasks
        self.n_segments = n_tasks if n_segments is None else n_segments
        self.acc = np.full((self.n_tasks, self.n_segments), np.nan)
        self.learned_at = [i for i in range(self.n_tasks)] if n_segments is None else [None] * n_tasks

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        """Build a square matrix from nested lists; ``None`` marks an absent cell."""
        n = len(rows)
        m = cls(n)
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    m.set(i, j, v)
        return m

    def set(self, task: int, segment: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise MetricsError(f"accuracy {value} outside [0, 1]")
        self.acc[task, segment] = value

    def get(self, task: int, segment: int) -> float | None:
        v = self.acc[task, segment]
        return None if math.isnan(v) else float(v)

    def final_column(self) -> np.ndarray:
        col = self.acc[:, -1]
        if np.any(np.isnan(col)):
            raise MetricsError("final column has missing entries")
        return col

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", *(f"after_{j + 1}" for j in range(self.n_segments))])
        for i in range(self.n_tasks):
            w.writerow([i + 1, *("" if math.isnan(v) else f"{100 * v:.2f}" for v in self.acc[i])])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "acc": [[None if math.isnan(v) else float(v) for v in row] for row in self.acc],
            "learned_at": self.learned_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        rows = d["acc"]
        m = cls(len(rows), len(rows[0]) if rows else 0)
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    m.acc[i, j] = v
        m.learned_at = list(d["learned_at"])
        return m

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AccuracyMatrix)
            and self.acc.shape == other.acc.shape
            and np.array_equal(self.acc, other.acc, equal_nan=True)
            and self.learned_at == other.learned_at
        )


def avg_final_accuracy(a: AccuracyMatrix) -> float:
    return float(np.mean(a.final_column()))


def avg_forgetting(a: AccuracyMatrix) -> float | None:
    """Mean over all but the last-learned task of (accuracy when learned - final accuracy).

    None when only one task exists.
    """
    if a.n_tasks < 2:
        return None
    final = a.final_column()
    last = int(np.argmax([-1 if s is None else s for s in a.learned_at]))
    drops = []
    for i in range(a.n_tasks):
        if i == last:
            continue
        j = a.learned_at[i]
        if j is None or math.isnan(a.acc[i, j]):
            raise MetricsError(f"missing accuracy for task {i + 1} right after learning it")
        drops.append(a.acc[i, j] - final[i])
    return float(np.mean(drops))


def accuracy(model: FlowModel, registry: TaskRegistry, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(classify(model, registry, x) == y))


def overall_accuracy(model, registry, tests, relabel: dict[int, int]) -> float:
    """Fraction of points whose (class, task) is predicted exactly.

    ``tests`` is a sequence of ``(x, y, true_task)``; ``relabel`` maps every
    registry task id to the ground-truth task it was created for.
    """
    missing = [t for t in registry.task_ids if t not in relabel]
    if missing:
        raise MetricsError(f"detected tasks {missing} have no ground-truth label")
    hits = total = 0
    for x, y, true_task in tests:
        pred_y, pred_t = classify_joint(model, registry, x)
        mapped = np.array([relabel[int(t)] for t in pred_t])
        hits += int(np.sum((pred_y == y) & (mapped == true_task)))
        total += len(y)
    return hits / total if total else float("nan")


def relabel_from_creations(creations: list[tuple[int, int]]) -> dict[int, int]:
    """Map each registry task to the ground-truth task active when it was spawned.

    ``creations`` holds ``(registry_task, ground_truth_task)`` pairs.
    """
    return {int(t): int(g) for t, g in creations}


def summarize(values: list[float | None]) -> dict:
    """Mean and population std over seeds, ignoring absent values."""
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
