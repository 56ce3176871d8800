import numpy as np
import pytest

from flowcl.flow import FlowModel
from flowcl.mixture import TaskRegistry
from flowcl.numeric import rng_create


def fixed_registry(means) -> TaskRegistry:
    """Registry with hand-chosen means of shape (T, K, D)."""
    means = np.asarray(means, dtype=np.float64)
    t, k, d = means.shape
    header = {
        "n_classes": k,
        "dim": d,
        "mean_scale": 1.0,
        "min_separation": 0.0,
        "max_retries": 100,
        "task_ids": list(range(t)),
    }
    return TaskRegistry.from_arrays(header, means)


def random_flow(dim=2, n_layers=2, hidden=(8,), seed=0, scale=0.5) -> FlowModel:
    return FlowModel(dim, n_layers, hidden).randomize(rng_create(seed, 4), scale)


@pytest.fixture
def identity2():
    return FlowModel(2, n_layers=2, hidden=(8,))


# Criterion number -> (passed, detail); filled by test_acceptance.py.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
