"""Run configuration: a YAML document mapping onto the module configs.

Every section is optional and falls back to defaults. Unknown keys, wrong
types and out-of-range values raise :class:`ConfigError` carrying the
1-based line of the offending node.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, UncertGraphError
from .gnn import FocalLossConfig
from .neighbors import NeighborConfig
from .pipelines import EXPERIMENTS, ExperimentConfig
from .segnet import SegNetConfig
from .uncertainty import EdgeWeightConfig


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 20
    n_test: int = 5
    dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be at least 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError("dims must be three positive integers")


@dataclass(frozen=True)
class TrainConfig:
    """Supervised U-Net pretraining schedule."""

    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 16
    empty_fraction: float = 0.25

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.empty_fraction <= 1.0:
            raise ConfigError("empty_fraction must lie in [0, 1]")


SECTIONS = {
    "dataset": DatasetConfig,
    "segnet": SegNetConfig,
    "train": TrainConfig,
    "edge": EdgeWeightConfig,
    "neighbor": NeighborConfig,
    "focal": FocalLossConfig,
    "experiment": ExperimentConfig,
}

# sections each stage depends on, for artifact hashes
STAGES = {
    "synth": ("dataset",),
    "train-unet": ("dataset", "segnet", "train"),
    "mcdo": ("dataset", "segnet", "train", "experiment"),
    "build-graph": ("dataset", "segnet", "train", "experiment", "edge"),
    "refine": ("dataset", "segnet", "train", "experiment", "edge", "neighbor", "focal"),
    "uat": ("dataset", "segnet", "train", "experiment", "edge", "neighbor", "focal"),
    "matrix": ("dataset", "segnet", "train", "experiment", "edge", "neighbor", "focal", "matrix"),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    data_dir: str | None = None  # defaults to <output_dir>/data
    dataset: DatasetConfig = DatasetConfig()
    segnet: SegNetConfig = SegNetConfig()
    train: TrainConfig = TrainConfig()
    edge: EdgeWeightConfig = EdgeWeightConfig()
    neighbor: NeighborConfig = NeighborConfig()
    focal: FocalLossConfig = FocalLossConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    matrix: tuple[str, ...] = tuple(EXPERIMENTS)

    def validate(self) -> None:
        for name in SECTIONS:
            getattr(self, name).validate()
        bad = [m for m in self.matrix if m not in EXPERIMENTS]
        if bad:
            raise ConfigError(f"unknown matrix experiments {bad}")

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self, stage: str | None = None) -> str:
        """Content hash of the sections ``stage`` depends on (all when None).

        Locations (output and data directories) never enter the hash.
        """
        d = self.to_dict()
        keys = STAGES[stage] if stage else [k for k in d if k not in ("output_dir", "data_dir")]
        sub = {k: d[k] for k in keys} | {"seed": d["seed"]}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def with_experiment(self, name: str) -> "RunConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment, experiment=name))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------- loading


def _line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def _scalar(node: yaml.Node, expected: type, key: str):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{key}: expected a scalar", _line(node))
    value = yaml.safe_load(yaml.serialize(node))
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is float and isinstance(value, str):
        try:  # YAML 1.1 reads "1e-2" as a string
            value = float(value)
        except ValueError:
            pass
    if expected is type(None):
        return value
    if value is not None and not (isinstance(value, expected) and not (expected is int and isinstance(value, bool))):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}", _line(node))
    return value


def _convert(node: yaml.Node, annotation, key: str):
    text = str(annotation)
    if text.startswith("tuple"):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{key}: expected a list", _line(node))
        inner = int if "int" in text else str
        return tuple(_scalar(item, inner, key) for item in node.value)
    if "None" in text:
        if isinstance(node, yaml.ScalarNode) and node.value in ("", "null", "~"):
            return None
        inner = str if "str" in text else float if "float" in text else int
        return _scalar(node, inner, key)
    base = {"int": int, "float": float, "str": str, "bool": bool}.get(text.replace("<class '", "").rstrip("'>"), str)
    return _scalar(node, base, key)


def _build(cls, node: yaml.Node, prefix: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{prefix}: expected a mapping", _line(node))
    known = {f.name: f for f in fields(cls)}
    kwargs, lines = {}, {}
    for knode, vnode in node.value:
        key = knode.value
        if key not in known:
            raise ConfigError(f"unknown key {prefix + '.' if prefix else ''}{key}", _line(knode))
        if key in kwargs:
            raise ConfigError(f"duplicate key {key!r}", _line(knode))
        full = f"{prefix}.{key}" if prefix else key
        if cls is RunConfig and key in SECTIONS:
            kwargs[key] = _build(SECTIONS[key], vnode, full)
        else:
            kwargs[key] = _convert(vnode, known[key].type, full)
        lines[key] = _line(knode)
    try:
        obj = cls(**kwargs)
        if cls is not RunConfig:
            obj.validate()
    except (UncertGraphError, TypeError) as exc:
        msg = str(exc).split(": ", 1)[1] if isinstance(exc, ConfigError) and exc.line else str(exc)
        # point at the key the message names, else at the section itself
        named = [k for k in lines if re.search(rf"\b{re.escape(k)}\b", msg)]
        raise ConfigError(f"{prefix or 'config'}: {msg}", lines[named[0]] if named else _line(node)) from None
    return obj


def loads(text: str) -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"YAML syntax: {exc.problem}", mark.line + 1 if mark else None) from None
    if root is None:
        return RunConfig()
    cfg = _build(RunConfig, root, "")
    if cfg.matrix:
        try:
            cfg.validate()
        except ConfigError as exc:
            matrix_line = next((_line(k) for k, _ in root.value if k.value == "matrix"), None)
            raise ConfigError(str(exc), matrix_line) from None
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return loads(path.read_text())


def from_dict(d: dict) -> RunConfig:
    """JSON-equivalent entry point (also used to re-read manifests)."""
    return loads(yaml.safe_dump(d, sort_keys=False))
