"""Fixed latent Gaussian means per (class, task) and Bayes-rule classification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .flow import FlowModel


class RegistryError(RuntimeError):
    pass


@dataclass
class TaskRegistry:
    """Append-only table of latent means ``means[t][y]`` (classes are 0-based internally).

    Means are drawn once, at task creation, and never change afterwards.
    """

    n_classes: int
    dim: int
    mean_scale: float = 1.0
    min_separation: float = 1.0
    max_retries: int = 100
    task_ids: list[int] = field(default_factory=list)
    _means: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1:
            raise ValueError("n_classes and dim must be positive")

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def __len__(self) -> int:
        return self.n_tasks

    def means(self, task: int) -> np.ndarray:
        """(K, D) means of one task; read-only view."""
        try:
            m = self._means[self.task_ids.index(task)]
        except ValueError:
            raise KeyError(f"unknown task {task}") from None
        view = m.view()
        view.flags.writeable = False
        return view

    def mean(self, y: int, task: int) -> np.ndarray:
        m = self.means(task)
        if not 0 <= y < self.n_classes:
            raise KeyError(f"unknown class {y}")
        return m[y]

    def all_means(self) -> np.ndarray:
        """(T, K, D) stack in creation order."""
        if not self._means:
            return np.zeros((0, self.n_classes, self.dim))
        return np.stack(self._means)

    def lookup(self, ys: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """Row-wise means for label arrays."""
        table = self.all_means()
        pos = {t: i for i, t in enumerate(self.task_ids)}
        try:
            ti = np.array([pos[int(t)] for t in ts], dtype=int)
        except KeyError as exc:
            raise KeyError(f"unknown task {exc.args[0]}") from None
        ys = np.asarray(ys, dtype=int)
        if ys.size and (ys.min() < 0 or ys.max() >= self.n_classes):
            raise KeyError("class label out of range")
        return table[ti, ys]

    def spawn_task(self, rng: np.random.Generator) -> int:
        """Append K means drawn from N(0, scale^2 I), resampling any that crowd existing ones."""
        existing = [m for block in self._means for m in block]
        new = []
        for _ in range(self.n_classes):
            for _attempt in range(self.max_retries + 1):
                cand = self.mean_scale * rng.standard_normal(self.dim)
                if all(np.linalg.norm(cand - other) >= self.min_separation for other in existing + new):
                    break
            else:
                raise RegistryError(
                    f"could not place a mean {self.min_separation} away from {len(existing) + len(new)} "
                    f"others in {self.max_retries} retries; increase mean_scale"
                )
            new.append(cand)
        task_id = self.task_ids[-1] + 1 if self.task_ids else 0
        self.task_ids.append(task_id)
        self._means.append(np.stack(new))
        return task_id

    def copy(self) -> "TaskRegistry":
        other = TaskRegistry(self.n_classes, self.dim, self.mean_scale, self.min_separation, self.max_retries)
        other.task_ids = list(self.task_ids)
        other._means = [m.copy() for m in self._means]
        return other

    def to_arrays(self) -> dict:
        return {
            "registry_header": {
                "n_classes": self.n_classes,
                "dim": self.dim,
                "mean_scale": self.mean_scale,
                "min_separation": self.min_separation,
                "max_retries": self.max_retries,
                "task_ids": self.task_ids,
            },
            "registry_means": self.all_means(),
        }

    @classmethod
    def from_arrays(cls, header: dict, means: np.ndarray) -> "TaskRegistry":
        reg = cls(header["n_classes"], header["dim"], header["mean_scale"], header["min_separation"], header["max_retries"])
        reg.task_ids = [int(t) for t in header["task_ids"]]
        reg._means = [np.array(m) for m in means]
        return reg


def component_logprobs(model: FlowModel, registry: TaskRegistry, x: np.ndarray) -> np.ndarray:
    """log p(x | y, t) for every component: shape (N, T, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, logdet = model.forward(x)
    table = registry.all_means()  # (T, K, D)
    sq = np.sum((z[:, None, None, :] - table[None]) ** 2, axis=-1)
    return -0.5 * model.dim * np.log(2 * np.pi) - 0.5 * sq + logdet[:, None, None]


def joint_logprob(model: FlowModel, registry: TaskRegistry, x: np.ndarray, y: int, t: int) -> float:
    mean = registry.mean(y, t)
    return float(model.logprob(np.asarray(x, dtype=np.float64), mean)) - np.log(registry.n_classes)


def _require_tasks(registry: TaskRegistry) -> None:
    if registry.n_tasks == 0:
        raise RegistryError("registry has no tasks")


def class_scores(model: FlowModel, registry: TaskRegistry, x: np.ndarray) -> np.ndarray:
    """Per-class log sum over tasks of p(x | y, t): shape (N, K)."""
    _require_tasks(registry)
    return logsumexp(component_logprobs(model, registry, x), axis=1)


def classify(model: FlowModel, registry: TaskRegistry, x: np.ndarray):
    """argmax_y sum_t p(x | y, t).  np.argmax breaks ties towards the smallest class."""
    x = np.asarray(x, dtype=np.float64)
    pred = np.argmax(class_scores(model, registry, x), axis=1)
    return int(pred[0]) if x.ndim == 1 else pred


def classify_joint(model: FlowModel, registry: TaskRegistry, x: np.ndarray):
    """argmax over (task, class) pairs; returns (classes, task ids).

    Ties go to the lowest task, then the lowest class (row-major argmax).
    """
    _require_tasks(registry)
    x = np.asarray(x, dtype=np.float64)
    lp = component_logprobs(model, registry, x)
    n, n_t, k = lp.shape
    flat = np.argmax(lp.reshape(n, n_t * k), axis=1)
    ti, y = np.divmod(flat, k)
    tasks = np.asarray(registry.task_ids)[ti]
    if x.ndim == 1:
        return int(y[0]), int(tasks[0])
    return y, tasks
