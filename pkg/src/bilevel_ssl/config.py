"""Run configuration: a JSON file plus ``key=value`` overrides on the command line."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datagen import DatasetSpec
from .training import TrainConfig

OUTPUT_ENV = "BSSL_OUTPUT_DIR"
THREADS_ENV = "BSSL_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every key has a default; unknown keys are rejected."""

    output_dir: str = "runs/default"
    dataset: str = ""
    mode: str = "rebo"
    num_classes: int = 8
    num_points: int = 256
    counts: dict = field(default_factory=lambda: {"L": 40, "U": 400, "W": 200, "S": 200, "O": 0, "T": 400})
    data_seed: int = 0
    unlabeled_cohorts: list = field(default_factory=lambda: ["U", "W", "S", "O"])
    checkpoint_every: int = 10
    subset_fraction: float = 0.1
    finetune_epochs: int = 50
    continual_mode: str = "estimate-fix"
    continual_epochs: int = 50
    unseen_count: int = 200
    weights_file: str = ""
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("baseline", "rebo", "transfer", "finetune", "continual"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.continual_mode not in ("estimate-fix", "fine-tune"):
            raise ConfigError(f"unknown continual mode {self.continual_mode!r}")
        unknown = set(self.train) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        try:
            self.train_config()
            self.dataset_spec()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.num_classes, self.num_points, dict(self.counts), self.data_seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train"] = _jsonable(self.train_config().to_dict())
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """``a.b=value`` sets ``raw["a"]["b"]``; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = _parse_value(text)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides or []:
        apply_override(raw, item)
    unknown = set(raw) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if os.environ.get(OUTPUT_ENV):
        raw["output_dir"] = os.environ[OUTPUT_ENV]
    try:
        return RunConfig(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def apply_thread_limit() -> None:
    """Pin BLAS pools to ``BSSL_THREADS`` before numpy spins them up."""
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n
