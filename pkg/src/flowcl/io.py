"""Atomic file output and model/registry checkpoints."""

from __future__ import annotations

import contextlib
import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .mixture import TaskRegistry


@contextlib.contextmanager
def atomic_writer(path, binary: bool = False):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        mode = "wb" if binary else "w"
        kwargs = {} if binary else {"encoding": "utf-8", "newline": ""}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    with atomic_writer(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows) -> None:
    with atomic_writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def save_checkpoint(path, model: FlowModel, registry: TaskRegistry | None = None) -> None:
    arrays = {"flow_header": np.array(json.dumps(model.header())), "theta": model.theta}
    if registry is not None:
        reg = registry.to_arrays()
        arrays["registry_header"] = np.array(json.dumps(reg["registry_header"]))
        arrays["registry_means"] = reg["registry_means"]
    with atomic_writer(path, binary=True) as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[FlowModel, TaskRegistry | None]:
    with np.load(path, allow_pickle=False) as data:
        model = FlowModel.from_header(json.loads(str(data["flow_header"])), data["theta"])
        registry = None
        if "registry_header" in data:
            registry = TaskRegistry.from_arrays(json.loads(str(data["registry_header"])), data["registry_means"])
    return model, registry
