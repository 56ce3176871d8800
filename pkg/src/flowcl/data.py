"""Synthetic benchmarks, embedding-file ingestion and task sequences.

Class labels are 0-based everywhere: a task with K classes uses {0, ..., K-1}.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskDataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max()) + 1) if len(self.y_train) else 0


@dataclass(frozen=True)
class SequenceSpec:
    order: tuple[int, ...]  # 0-based indices into the task list
    epochs: int

    def __post_init__(self):
        if not self.order:
            raise ValueError("empty task order")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def validate(self, n_tasks: int) -> None:
        bad = [i for i in self.order if not 0 <= i < n_tasks]
        if bad:
            raise ValueError(f"sequence references undefined tasks {bad} (have {n_tasks})")

    @classmethod
    def load(cls, path) -> "SequenceSpec":
        """Read ``{"order": [1, 2, 3, 1, 4], "epochs": e}`` (1-based task numbers in the file)."""
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw) - {"order", "epochs"}
        if unknown:
            raise DataFormatError(f"unknown keys in sequence file: {sorted(unknown)}")
        return cls(tuple(int(i) - 1 for i in raw["order"]), int(raw["epochs"]))

    def dump(self) -> dict:
        return {"order": [i + 1 for i in self.order], "epochs": self.epochs}


def _split(name, xs, ys, n_test_per_class, rng):
    """Stratified train/test split; keeps per-class counts exact."""
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in np.unique(ys):
        idx = np.flatnonzero(ys == c)
        idx = idx[rng.permutation(len(idx))]
        te, tr = idx[:n_test_per_class], idx[n_test_per_class:]
        tr_x.append(xs[tr]), tr_y.append(ys[tr]), te_x.append(xs[te]), te_y.append(ys[te])
    return TaskDataset(name, np.concatenate(tr_x), np.concatenate(tr_y), np.concatenate(te_x), np.concatenate(te_y))


def gen_two_moons(n_per_moon: int, noise: float, rng: np.random.Generator, n_test: int | None = None):
    """Two interleaving half circles; the upper moon is task 0, the lower one task 1 (one class each).

    Upper moon: centre (0, 0), radius 1.  Lower moon: centre (1, 0.5), radius 1, flipped.
    """
    if noise < 0:
        raise ValueError("noise must be non-negative")
    n_test = n_per_moon // 5 if n_test is None else n_test
    out = []
    for moon in (0, 1):
        n = n_per_moon + n_test
        angle = rng.uniform(0.0, np.pi, size=n)
        if moon == 0:
            pts = np.stack([np.cos(angle), np.sin(angle)], axis=1)
        else:
            pts = np.stack([1.0 - np.cos(angle), 0.5 - np.sin(angle)], axis=1)
        pts = pts + noise * rng.standard_normal(pts.shape)
        out.append(_split(f"moon{moon + 1}", pts, np.zeros(n, dtype=int), n_test, rng))
    return out


def gaussian_task_centers(n_tasks, n_classes, dim, class_sep, task_shift, rng):
    """(M, K, D) class centres.

    Task m is displaced by ``task_shift`` along coordinate axis m mod D.  Within
    a task the K centres sit on a line through the task centre along a random
    unit direction, consecutive centres ``class_sep`` apart.
    """
    centers = np.zeros((n_tasks, n_classes, dim))
    offsets = (np.arange(n_classes) - (n_classes - 1) / 2.0) * class_sep
    for m in range(n_tasks):
        base = np.zeros(dim)
        base[m % dim] = task_shift
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        centers[m] = base + offsets[:, None] * u
    return centers


def gen_gaussian_tasks(
    n_tasks: int,
    n_classes: int,
    dim: int,
    class_sep: float,
    task_shift: float,
    n_per_class: int,
    rng: np.random.Generator,
    n_test_per_class: int | None = None,
    std: float = 0.5,
) -> list[TaskDataset]:
    """Domain-incremental tasks: class c of task m ~ N(center[m, c], std^2 I)."""
    if min(n_tasks, n_classes, n_per_class) < 1 or dim < 2:
        raise ValueError("need n_tasks, n_classes, n_per_class >= 1 and dim >= 2")
    n_test = n_per_class // 5 if n_test_per_class is None else n_test_per_class
    centers = gaussian_task_centers(n_tasks, n_classes, dim, class_sep, task_shift, rng)
    tasks = []
    for m in range(n_tasks):
        n = n_per_class + n_test
        ys = np.repeat(np.arange(n_classes), n)
        xs = centers[m][ys] + std * rng.standard_normal((len(ys), dim))
        tasks.append(_split(f"task{m + 1}", xs, ys, n_test, rng))
    return tasks


def _read_rows(path):
    path = Path(path)
    labels, feats = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label" or len(header) < 2:
            raise DataFormatError(f"{path}:1: header must be 'label,feature_0,...'")
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                feats.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(labels), np.array(feats, dtype=np.float64)


def load_embedding_dataset(
    path,
    n_classes: int,
    rng: np.random.Generator | None = None,
    test_fraction: float = 0.2,
    test_path=None,
) -> list[TaskDataset]:
    """Split a ``label,feature_0,...`` CSV into tasks of ``n_classes`` consecutive original classes.

    With ``test_path`` the second file provides the test split; otherwise a
    stratified ``test_fraction`` of each class is held out (needs ``rng``).
    """
    labels, feats = _read_rows(path)
    classes = np.unique(labels)
    if len(classes) % n_classes:
        raise ValueError(f"{len(classes)} classes cannot be split into tasks of {n_classes}")
    if test_path is not None:
        t_labels, t_feats = _read_rows(test_path)
        if t_feats.shape[1] != feats.shape[1]:
            raise DataFormatError("train/test feature widths differ")
    tasks = []
    for m in range(len(classes) // n_classes):
        group = classes[m * n_classes : (m + 1) * n_classes]
        relabel = {int(c): i for i, c in enumerate(group)}
        sel = np.isin(labels, group)
        xs, ys = feats[sel], np.array([relabel[int(c)] for c in labels[sel]])
        name = f"task{m + 1}"
        if test_path is not None:
            tsel = np.isin(t_labels, group)
            ty = np.array([relabel[int(c)] for c in t_labels[tsel]], dtype=int)
            tasks.append(TaskDataset(name, xs, ys, t_feats[tsel], ty))
        else:
            if rng is None:
                raise ValueError("rng required for the held-out split")
            n_test = int(round(test_fraction * min(np.bincount(ys))))
            tasks.append(_split(name, xs, ys, n_test, rng))
    return tasks


def write_embedding_csv(path, x: np.ndarray, labels: np.ndarray) -> None:
    from .io import atomic_writer

    with atomic_writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"feature_{i}" for i in range(x.shape[1]))])
        for lab, row in zip(labels, x):
            w.writerow([int(lab), *(repr(float(v)) for v in row)])
