"""Experiment configuration: a single JSON document with every default materialised."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, desk_backbone_spec
from .errors import ConfigError

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN = [f"data_batch_{k}.bin" for k in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


@dataclass
class DatasetConfig:
    kind: str = "mnist"  # "mnist" (IDX files) or "cifar10" (binary batches)
    root: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list[str] = field(default_factory=list)
    test_files: list[str] = field(default_factory=list)
    resize: list[int] | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    validation_fraction: float = 0.05
    class_count: int = 10

    def resolved(self) -> "DatasetConfig":
        """Fill standard file names under ``root`` for any path left unset."""
        if self.kind not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        out = replace(self, train_files=list(self.train_files), test_files=list(self.test_files))
        if self.root is None:
            return out
        root = Path(self.root)
        if self.kind == "mnist":
            for key, name in MNIST_FILES.items():
                if getattr(out, key) is None:
                    setattr(out, key, str(root / name))
        else:
            out.train_files = out.train_files or [str(root / n) for n in CIFAR_TRAIN]
            out.test_files = out.test_files or [str(root / n) for n in CIFAR_TEST]
        return out

    def sample_shape(self) -> tuple[int, int, int]:
        c, h, w = (1, 28, 28) if self.kind == "mnist" else (3, 32, 32)
        if self.resize:
            h, w = self.resize
        return c, h, w


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: dict | None = None  # BackboneSpec.to_dict(); None -> desk default for the dataset
    bottleneck: int = 64  # S for the desk default backbone
    D1: int = 8
    D2: int = 16
    routing_iterations: int = 3
    freeze_backbone: bool = False
    prune_ratio: float = 0.0
    finetune_epochs: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    dtype: str = "float32"
    out: str = "runs/default"

    def backbone_spec(self) -> BackboneSpec:
        if self.backbone is not None:
            return BackboneSpec.from_dict(self.backbone)
        return desk_backbone_spec(self.dataset.sample_shape(), self.bottleneck)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> "ExperimentConfig":
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if not 0 <= self.prune_ratio < 1:
            raise ConfigError(f"prune_ratio must be in [0, 1), got {self.prune_ratio}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        spec = self.backbone_spec()
        if spec.input_shape != self.dataset.sample_shape():
            raise ConfigError(
                f"backbone input shape {spec.input_shape} != dataset sample shape {self.dataset.sample_shape()}")
        if spec.bottleneck < self.D1:
            raise ConfigError(f"bottleneck width {spec.bottleneck} < D1={self.D1}: no primary capsule fits")
        return self

    def materialized(self) -> "ExperimentConfig":
        """Copy with resolved dataset paths and an explicit backbone spec."""
        return replace(self, dataset=self.dataset.resolved(), backbone=self.backbone_spec().to_dict())

    def to_dict(self) -> dict:
        return asdict(self)

    def model_identity(self) -> dict:
        """Everything except where outputs go; stored inside checkpoints."""
        d = self.to_dict()
        d.pop("out")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "dataset" in d:
            d["dataset"] = _sub(DatasetConfig, d["dataset"], "dataset")
        if "optimizer" in d:
            d["optimizer"] = _sub(OptimizerConfig, d["optimizer"], "optimizer")
        return cls(**d)


def _sub(kind, d: dict, where: str):
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return kind(**d)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
