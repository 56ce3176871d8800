"""Experiment configuration: a TOML file validated by pydantic.

Schema (every section optional; unknown keys are errors)::

    seeds = [0, 1, 2]
    out = "runs/bench"

    [dataset]
    kind = "gaussian"            # gaussian | moons | embedding
    n_tasks = 5                  # gaussian
    n_classes = 2                # gaussian, embedding (classes per task)
    dim = 8                      # gaussian
    class_sep = 8.0
    task_shift = 8.0
    n_per_class = 500
    n_test_per_class = 100
    std = 0.5
    n_per_moon = 500             # moons
    noise = 0.05
    path = "train.csv"           # embedding
    test_path = "test.csv"       # embedding, optional
    test_fraction = 0.2

    [sequence]
    order = [1, 2, 3, 1, 4]      # 1-based task numbers; default: each task once
    file = "sequence.json"       # alternative to order
    epochs = 10                  # overrides trainer.epochs when set

    [trainer]                    # see TrainerConfig
    mode = "task-aware"
    method = "fr"
    ...

    [flow]
    preset = "small"             # small | embedding | tiny
    layers = 8                   # overrides the preset
    hidden = [64, 64]
    clamp = 2.0

    [detector]
    sensitivity = 5.0
    window = 100
    warmup = 20
    cooldown = 20
    stats = ["S1"]
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Literal, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SequenceSpec
from .detector import DetectorConfig
from .flow import PRESETS
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["gaussian", "moons", "embedding"] = "gaussian"
    n_tasks: int = Field(5, ge=1)
    n_classes: int = Field(2, ge=1)
    dim: int = Field(8, ge=2)
    class_sep: float = 8.0
    task_shift: float = 8.0
    n_per_class: int = Field(500, ge=1)
    n_test_per_class: int = Field(100, ge=1)
    std: float = Field(0.5, gt=0)
    n_per_moon: int = Field(500, ge=1)
    noise: float = Field(0.05, ge=0)
    path: Optional[str] = None
    test_path: Optional[str] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind == "embedding" and not self.path:
            raise ValueError("dataset.path is required for kind = 'embedding'")
        return self


class SequenceSection(_Strict):
    order: Optional[list[int]] = None
    file: Optional[str] = None
    epochs: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if self.order is not None and self.file is not None:
            raise ValueError("give sequence.order or sequence.file, not both")
        return self


class TrainerSection(_Strict):
    mode: Literal["task-aware", "task-agnostic"] = "task-aware"
    method: Literal["none", "gr", "fr", "er", "mtl"] = "none"
    alpha: float = Field(1.0, ge=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    er_capacity: int = Field(1000, ge=1)
    mean_scale: float = Field(1.0, gt=0)
    min_separation: float = Field(1.0, ge=0)


class FlowSection(_Strict):
    preset: Literal["small", "embedding", "tiny"] = "small"
    layers: Optional[int] = Field(None, ge=1)
    hidden: Optional[list[int]] = None
    clamp: float = Field(2.0, gt=0)


class DetectorSection(_Strict):
    sensitivity: float = Field(5.0, ge=0)
    window: int = Field(100, ge=2)
    warmup: int = Field(20, ge=2)
    cooldown: int = Field(20, ge=0)
    stats: list[Literal["S1", "S2", "S3"]] = ["S1"]


class ExperimentConfig(_Strict):
    seeds: list[int] = [0]
    out: str = "runs/default"
    dataset: DatasetSection = DatasetSection()
    sequence: SequenceSection = SequenceSection()
    trainer: TrainerSection = TrainerSection()
    flow: FlowSection = FlowSection()
    detector: DetectorSection = DetectorSection()

    def detector_config(self) -> DetectorConfig:
        d = self.detector
        return DetectorConfig(d.sensitivity, d.window, d.warmup, d.cooldown, tuple(d.stats))

    def sequence_spec(self, base_dir: Path | None = None) -> SequenceSpec | None:
        s = self.sequence
        epochs = s.epochs or self.trainer.epochs
        if s.file is not None:
            path = Path(s.file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            spec = SequenceSpec.load(path)
            return SequenceSpec(spec.order, s.epochs or spec.epochs)
        if s.order is not None:
            return SequenceSpec(tuple(i - 1 for i in s.order), epochs)
        return None

    def trainer_config(self, seed: int, epochs: int | None = None) -> TrainerConfig:
        layers, hidden = PRESETS[self.flow.preset]
        t = self.trainer.model_dump()
        if epochs is not None:
            t["epochs"] = epochs
        return TrainerConfig(
            **t,
            flow_layers=self.flow.layers or layers,
            flow_hidden=tuple(self.flow.hidden or hidden),
            clamp=self.flow.clamp,
            detector=self.detector_config(),
            seed=seed,
        )


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with the value read as a TOML literal (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _line_of(source: str, loc: tuple) -> int | None:
    """Best-effort line number of the offending key in the TOML source."""
    if not loc:
        return None
    key = str(loc[-1])
    section = str(loc[0]) if len(loc) > 1 else None
    current = None
    for lineno, line in enumerate(source.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            continue
        if re.match(rf"^{re.escape(key)}\s*=", stripped) and (section is None or current == section):
            return lineno
    return None


def load_config(path=None, overrides: list[str] | None = None, source: str | None = None) -> ExperimentConfig:
    """Parse and validate completely; raises ConfigError with file:line diagnostics."""
    name = str(path) if path is not None else "<config>"
    if source is None:
        if path is None:
            source = ""
        else:
            try:
                source = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"{name}: cannot read config: {exc}") from None
    try:
        tree = tomllib.loads(source)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            where = ".".join(str(p) for p in loc) or "<root>"
            lineno = _line_of(source, loc)
            prefix = f"{name}:{lineno}" if lineno else name
            lines.append(f"{prefix}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None
