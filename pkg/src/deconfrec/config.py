"""Experiment configuration (YAML).

Schema (every key optional; defaults shown by ``deconfrec run --print-defaults``)::

    seed: 0
    output_dir: runs/default
    dataset:
      kind: synthetic | file
      path: ratings.dat            # kind=file
      format: movielens-dat | csv  # kind=file
      synth: {...}                 # SynthSpec fields, kind=synthetic
      max_users: null              # subsample users before splitting
      seq_len: 50
      train_neg_ratio: 4
      test_mode: ratio-1-to-99 | all-negatives
      test_negatives: 99
    grouping: {mode: sample-count | sequence-length, n: 5}
    model: {arch, d, h, ext_layers, activation, cross_features, user_embedding}
    train: {...}                   # TrainConfig fields
    eval: {k: [5, 10], tie_policy: strict, baseline: false}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional

import yaml

from .data import FORMATS, TEST_MODES, SynthSpec
from .errors import ConfigError
from .grouping import MODES
from .metrics import TIE_POLICIES
from .models import ACTIVATIONS, ARCHS
from .trainer import TrainConfig


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    path: Optional[str] = None
    format: str = "csv"
    synth: SynthSpec = field(default_factory=SynthSpec)
    max_users: Optional[int] = None
    seq_len: int = 50
    train_neg_ratio: int = 4
    test_mode: str = "ratio-1-to-99"
    test_negatives: int = 99


@dataclass
class GroupingConfig:
    mode: str = "sample-count"
    n: int = 5


@dataclass
class ModelConfig:
    arch: str = "target-attention"
    d: int = 8
    h: int = 16
    ext_layers: int = 1
    activation: str = "tanh"
    cross_features: bool = True
    user_embedding: bool = True


@dataclass
class EvalConfig:
    k: List[int] = field(default_factory=lambda: [5, 10])
    tie_policy: str = "strict"
    # also train a plain joint model (n = 1, no plugins) for comparison
    baseline: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["frozen"] = list(self.train.frozen)
        d["dataset"]["synth"]["activeness_ranges"] = [
            list(r) for r in self.dataset.synth.activeness_ranges]
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = from_dict(self.to_dict())
        cfg.seed = seed
        cfg.train.seed = seed
        cfg.dataset.synth.seed = seed
        return cfg

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        ds = self.dataset
        if ds.kind not in ("synthetic", "file"):
            raise ConfigError("dataset.kind must be 'synthetic' or 'file'")
        if ds.kind == "file":
            if not ds.path:
                raise ConfigError("dataset.path is required when dataset.kind is 'file'")
            if check_paths and not Path(ds.path).exists():
                raise ConfigError(f"dataset.path does not exist: {ds.path}")
            if ds.format not in FORMATS:
                raise ConfigError(f"dataset.format must be one of {FORMATS}")
        else:
            try:
                ds.synth.validate()
            except ValueError as exc:
                raise ConfigError(f"dataset.synth: {exc}") from None
        if ds.test_mode not in TEST_MODES:
            raise ConfigError(f"dataset.test_mode must be one of {TEST_MODES}")
        if ds.seq_len < 1 or ds.train_neg_ratio < 1 or ds.test_negatives < 1:
            raise ConfigError("dataset.seq_len, train_neg_ratio and test_negatives must be >= 1")
        if self.grouping.mode not in MODES:
            raise ConfigError(f"grouping.mode must be one of {MODES}")
        if self.grouping.n < 1:
            raise ConfigError("grouping.n must be >= 1")
        if self.model.arch not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}")
        if self.model.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation must be one of {ACTIVATIONS}")
        if self.eval.tie_policy not in TIE_POLICIES:
            raise ConfigError(f"eval.tie_policy must be one of {TIE_POLICIES}")
        if not self.eval.k or any(k < 1 for k in self.eval.k):
            raise ConfigError("eval.k must list positive cutoffs")
        self.train.validate()
        return self


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    ds_raw = dict(raw.get("dataset") or {})
    synth = _build(SynthSpec, ds_raw.pop("synth", None), "dataset.synth")
    dataset = _build(DatasetConfig, ds_raw, "dataset")
    dataset.synth = synth
    train_raw = dict(raw.get("train") or {})
    if "frozen" in train_raw:
        train_raw["frozen"] = tuple(train_raw["frozen"] or ())
    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        output_dir=str(raw.get("output_dir", "runs/default")),
        dataset=dataset,
        grouping=_build(GroupingConfig, raw.get("grouping"), "grouping"),
        model=_build(ModelConfig, raw.get("model"), "model"),
        train=_build(TrainConfig, train_raw, "train"),
        eval=_build(EvalConfig, raw.get("eval"), "eval"),
    )
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(raw)
