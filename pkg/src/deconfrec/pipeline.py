"""End-to-end experiment: ingest -> group -> stage I -> stage II -> evaluate.

Every step reads and writes files under the configured output directory, so
the CLI can run steps one at a time; :func:`run_experiment` chains them.
"""
from __future__ import annotations

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import data as data_io
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import DataError, DeconfrecError
from .grouping import (GroupAssignment, assign_groups, compute_activeness, read_assignment,
                       sample_counts, write_assignment)
from .metrics import build_report
from .models import TrunkParams, build_model
from .plotting import plot_group_auc, plot_training_curves
from .plugins import predict_routed
from .report import write_report
from .trainer import TrainHistory, train_stage1, train_stage2

log = logging.getLogger(__name__)


class StageError(DeconfrecError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, DeconfrecError):
            self.exit_code = cause.exit_code
        elif isinstance(cause, OSError):
            self.exit_code = DataError.exit_code


@contextmanager
def stage(name: str, manifest: Optional["Manifest"] = None):
    log.info("== %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        if manifest is not None:
            manifest.fail(name, exc)
        raise StageError(name, exc) from exc


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects results (the output location does not)."""
    d = cfg.to_dict()
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class Manifest:
    """``manifest.json`` tracking status, seeds and content hashes of outputs."""

    def __init__(self, out_dir: Path, cfg: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        self.out_dir = out_dir
        self.data = {"status": "incomplete", "seed": cfg.seed, "train_seed": cfg.train.seed,
                     "config_hash": config_hash(cfg), "files": {}}
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def fail(self, stage_name, exc):
        self.data.update(status="failed", failed_stage=stage_name, error=str(exc))
        self._write()

    def complete(self):
        files = {}
        for p in sorted(self.out_dir.rglob("*")):
            if p.is_file() and p != self.path:
                files[str(p.relative_to(self.out_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
        self.data.update(status="complete", files=files)
        self._write()


# ------------------------------------------------------------------ dataset

@dataclass
class Prepared:
    dataset: data_io.SampledDataset
    train: data_io.SampleSet
    val: data_io.SampleSet
    summary: dict = field(default_factory=dict)


def load_log(cfg: ExperimentConfig) -> data_io.InteractionLog:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return data_io.generate_synthetic(ds.synth)
    return data_io.load_interactions(ds.path, ds.format)


def prepare_dataset(cfg: ExperimentConfig, raw: Optional[data_io.InteractionLog] = None):
    ds = cfg.dataset
    raw = raw if raw is not None else load_log(cfg)
    if ds.max_users:
        raw = data_io.subsample_users(raw, ds.max_users, cfg.seed)
    split = data_io.leave_last_out_split(raw)
    sampled = data_io.negative_sample(split, ds.train_neg_ratio, ds.test_mode, cfg.seed,
                                      L=ds.seq_len, test_negatives=ds.test_negatives)
    train, val = validation_split(sampled.train, cfg.train.val_fraction, cfg.seed)
    summary = {
        "interactions": int(len(raw)),
        "users": int(len(np.unique(raw.users))),
        "items": int(len(np.unique(raw.items))),
        "excluded_users": int(split.excluded_users),
        "train_samples": int(len(sampled.train)),
        "test_samples": int(len(sampled.test)),
        "replacement_users": len(sampled.replacement_users),
    }
    return Prepared(sampled, train, val, summary)


def validation_split(samples: data_io.SampleSet, fraction: float, seed: int):
    """Random held-out rows of the training set (seeded)."""
    if fraction <= 0:
        empty = np.empty(0, np.int64)
        return samples, samples.subset(empty)
    perm = np.random.default_rng([seed, 7]).permutation(len(samples))
    n_val = int(round(fraction * len(samples)))
    return samples.subset(np.sort(perm[n_val:])), samples.subset(np.sort(perm[:n_val]))


def make_assignment(cfg: ExperimentConfig, train_all: data_io.SampleSet,
                    n: Optional[int] = None) -> GroupAssignment:
    act = compute_activeness(train_all, cfg.grouping.mode)
    return assign_groups(act, n or cfg.grouping.n, sample_counts(train_all))


def new_trunk(cfg: ExperimentConfig, n_users: int, n_items: int) -> TrunkParams:
    m = cfg.model
    return build_model(m.arch, n_users, n_items, d=m.d, h=m.h, L=cfg.dataset.seq_len,
                       seed=cfg.seed, ext_layers=m.ext_layers, activation=m.activation,
                       cross_features=m.cross_features, user_embedding=m.user_embedding)


# ---------------------------------------------------------------- evaluation

def evaluate_variant(cfg, trunk, plugins, test: data_io.SampleSet, assignment,
                     history_len: Dict[int, int]) -> dict:
    # unseen users fall back to the group whose activeness range is nearest;
    # in sample-count mode a user's samples are positives times (1 + ratio)
    scale = 1 if cfg.grouping.mode == "sequence-length" else 1 + cfg.dataset.train_neg_ratio

    def group_of(u):
        return assignment.group_for(u, scale * history_len.get(u, 0))

    scores = predict_routed(trunk, plugins, test, group_of)
    route = GroupAssignment({int(u): group_of(int(u)) for u in np.unique(test.users)},
                            assignment.counts, assignment.total, assignment.n, assignment.ranges)
    rep = build_report(scores, test.labels, test.users, route, level="both",
                       k_values=cfg.eval.k, tie_policy=cfg.eval.tie_policy)
    return {"groups": rep.groups, "user_level": rep.user_level}


def build_metadata(cfg: ExperimentConfig, summary: dict) -> dict:
    ds = cfg.dataset
    name = "synthetic" if ds.kind == "synthetic" else Path(ds.path).name
    return {"dataset": name, "arch": cfg.model.arch, "seed": cfg.seed,
            "config_hash": config_hash(cfg), "k": list(cfg.eval.k),
            "tie_policy": cfg.eval.tie_policy, "data_summary": summary,
            "config": cfg.to_dict()}


# --------------------------------------------------------------- orchestration

@dataclass
class ExperimentResult:
    report: dict
    out_dir: Path
    history: TrainHistory
    models: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig, out_dir=None, write_files: bool = True,
                   raw: Optional[data_io.InteractionLog] = None) -> ExperimentResult:
    """Full pipeline. Variants reported: ``ga+pn`` (headline), ``ga`` (stage-I
    trunk) and, with ``eval.baseline``, ``base`` (plain joint training)."""
    with stage("config"):
        cfg.validate()
    out_dir = Path(out_dir or cfg.output_dir)
    manifest = None
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(out_dir / "config.yaml")
        manifest = Manifest(out_dir, cfg)
    ckpt_dir = out_dir / "checkpoints" if write_files else None

    with stage("ingest", manifest):
        prep = prepare_dataset(cfg, raw)
        ds = prep.dataset
        if write_files:
            write_dataset(prep, out_dir / "data", cfg)
    with stage("group", manifest):
        assignment = make_assignment(cfg, ds.train)
        if write_files:
            write_assignment(assignment, out_dir / "groups.csv")

    history = TrainHistory()
    models = {}
    trunk0 = new_trunk(cfg, ds.n_users, ds.n_items)
    if cfg.eval.baseline:
        with stage("train-baseline", manifest):
            joint = make_assignment(cfg, ds.train, n=1)
            base_hist = TrainHistory()
            models["base"] = (train_stage1(cfg.train, prep.train, joint, trunk0, prep.val,
                                           base_hist), {})
            for r in base_hist.rows:
                history.add(**{**r, "stage": "base"})
    with stage("train-stage1", manifest):
        trunk1 = train_stage1(cfg.train, prep.train, assignment, trunk0, prep.val, history,
                              checkpoint_dir=ckpt_dir)
        models["ga"] = (trunk1, {})
    with stage("train-stage2", manifest):
        trunk2, plugins = train_stage2(cfg.train, prep.train, assignment, trunk1, prep.val,
                                       history, checkpoint_dir=ckpt_dir)
        models["ga+pn"] = (trunk2, plugins)
    with stage("evaluate", manifest):
        variants = {}
        for name in ("ga+pn", "ga", "base"):
            if name in models:
                trunk, plugins = models[name]
                variants[name] = evaluate_variant(cfg, trunk, plugins, ds.test, assignment,
                                                  ds.history_len)
        report = {"metadata": build_metadata(cfg, prep.summary), "headline": "ga+pn",
                  "variants": variants}
        if write_files:
            meta = {"config_hash": config_hash(cfg), "seed": cfg.seed}
            for name, (trunk, plugins) in models.items():
                tag = name.replace("+", "_")
                save_checkpoint(ckpt_dir / f"{tag}.npz", trunk, plugins, meta=meta)
            write_outputs(report, history, out_dir)
    if manifest is not None:
        manifest.complete()
    return ExperimentResult(report, out_dir, history, models)


def write_outputs(report, history: TrainHistory, out_dir: Path) -> None:
    write_report(report, out_dir)
    history.write_csv(out_dir / "training_curves.csv")
    if history.grad_norms.rows:
        history.grad_norms.write(out_dir / "grad_norms.csv")
    plot_group_auc(report, out_dir / "figures" / "group_auc.png")
    plot_training_curves(history.rows, out_dir / "figures" / "training_curves.png")


# --------------------------------------------------------- step-wise file I/O

def write_dataset(prep: Prepared, data_dir: Path, cfg: ExperimentConfig) -> None:
    data_dir.mkdir(parents=True, exist_ok=True)
    ds = prep.dataset
    data_io.write_samples(ds.train, data_dir / "train.csv")
    data_io.write_samples(ds.test, data_dir / "test.csv")
    meta = {"n_users": ds.n_users, "n_items": ds.n_items, "seq_len": cfg.dataset.seq_len,
            "user_ids": ds.user_ids, "item_ids": ds.item_ids,
            "history_len": {str(k): v for k, v in sorted(ds.history_len.items())},
            "summary": prep.summary}
    (data_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_dataset(cfg: ExperimentConfig, out_dir: Path) -> Prepared:
    data_dir = out_dir / "data"
    if not (data_dir / "meta.json").exists():
        raise FileNotFoundError(f"{data_dir} has no ingested dataset; run 'ingest' first")
    meta = json.loads((data_dir / "meta.json").read_text())
    L = meta["seq_len"]
    train_all = data_io.read_samples(data_dir / "train.csv", L)
    test = data_io.read_samples(data_dir / "test.csv", L)
    ds = data_io.SampledDataset(train_all, test, meta["n_users"], meta["n_items"],
                                meta["user_ids"], meta["item_ids"],
                                history_len={int(k): v for k, v in meta["history_len"].items()})
    train, val = validation_split(train_all, cfg.train.val_fraction, cfg.seed)
    return Prepared(ds, train, val, meta["summary"])


def step_ingest(cfg, out_dir: Path) -> Prepared:
    prep = prepare_dataset(cfg)
    write_dataset(prep, out_dir / "data", cfg)
    return prep


def step_group(cfg, out_dir: Path) -> GroupAssignment:
    prep = read_dataset(cfg, out_dir)
    assignment = make_assignment(cfg, prep.dataset.train)
    write_assignment(assignment, out_dir / "groups.csv")
    return assignment


def _load_assignment(cfg, out_dir, prep):
    path = out_dir / "groups.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'group' first")
    return read_assignment(path, prep.dataset.train)


def step_train_stage1(cfg, out_dir: Path):
    prep = read_dataset(cfg, out_dir)
    assignment = _load_assignment(cfg, out_dir, prep)
    ds = prep.dataset
    history = TrainHistory()
    trunk0 = new_trunk(cfg, ds.n_users, ds.n_items)
    meta = {"config_hash": config_hash(cfg), "seed": cfg.seed}
    ckpt = out_dir / "checkpoints"
    if cfg.eval.baseline:
        joint = make_assignment(cfg, ds.train, n=1)
        base_hist = TrainHistory()
        base = train_stage1(cfg.train, prep.train, joint, trunk0, prep.val, base_hist)
        save_checkpoint(ckpt / "base.npz", base, meta=meta)
        for r in base_hist.rows:
            history.add(**{**r, "stage": "base"})
    trunk = train_stage1(cfg.train, prep.train, assignment, trunk0, prep.val, history,
                         checkpoint_dir=ckpt)
    save_checkpoint(ckpt / "ga.npz", trunk, meta=meta)
    history.write_csv(out_dir / "training_curves_stage1.csv")
    return trunk


def step_train_stage2(cfg, out_dir: Path):
    prep = read_dataset(cfg, out_dir)
    assignment = _load_assignment(cfg, out_dir, prep)
    path = out_dir / "checkpoints" / "ga.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'train-stage1' first")
    trunk, _, _, _ = load_checkpoint(path)
    history = TrainHistory()
    trunk2, plugins = train_stage2(cfg.train, prep.train, assignment, trunk, prep.val, history,
                                   checkpoint_dir=out_dir / "checkpoints")
    save_checkpoint(out_dir / "checkpoints" / "ga_pn.npz", trunk2, plugins,
                    meta={"config_hash": config_hash(cfg), "seed": cfg.seed})
    history.write_csv(out_dir / "training_curves_stage2.csv")
    return trunk2, plugins


def step_evaluate(cfg, out_dir: Path) -> dict:
    prep = read_dataset(cfg, out_dir)
    assignment = _load_assignment(cfg, out_dir, prep)
    ds = prep.dataset
    variants = {}
    for name in ("ga+pn", "ga", "base"):
        path = out_dir / "checkpoints" / f"{name.replace('+', '_')}.npz"
        if path.exists():
            trunk, plugins, _, _ = load_checkpoint(path)
            variants[name] = evaluate_variant(cfg, trunk, plugins, ds.test, assignment,
                                              ds.history_len)
    if not variants:
        raise FileNotFoundError("no checkpoints to evaluate; run the training steps first")
    report = {"metadata": build_metadata(cfg, prep.summary), "headline": next(iter(variants)),
              "variants": variants}
    write_report(report, out_dir)
    plot_group_auc(report, out_dir / "figures" / "group_auc.png")
    return report
