"""Two-stage training.

Stage I trains the trunk on aggregated per-group gradients. Stage II gives
every group its own plugin, updated right after that group's mini-batch,
while the trunk keeps receiving one aggregated update per global batch.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .aggregation import GradientQueue, GradNormLog, GroupWeights, aggregate
from .checkpoint import save_checkpoint
from .data import SampleSet
from .errors import ConfigError, StateError
from .grouping import GroupAssignment, group_indices, split_batch
from .metrics import auc
from .models import TrunkParams, backward, logits_with
from .numeric import bce_loss, sigmoid
from .optim import Adam
from .plugins import check_plugin, init_light, init_naive, plugin_backward, plugin_logits

log = logging.getLogger(__name__)

VARIANTS = ("light", "naive")
STOP_METRICS = ("val_loss", "val_auc")


@dataclass
class TrainConfig:
    stage1_lr: float = 0.001
    stage2_plugin_lr: float = 0.0001
    stage2_trunk_lr: float = 0.0001
    naive_plugin_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    minibatch_size: Optional[int] = None
    epochs_stage1: int = 10
    epochs_stage2: int = 5
    patience: int = 3
    stop_metric: str = "val_loss"
    seed: int = 0
    plugin_variant: str = "light"
    plugin_init_scale: float = 1e-3
    parallel: bool = False
    val_fraction: float = 0.1
    record_grad_norms: bool = False
    weight_decay: float = 0.0
    frozen: tuple = ()

    def validate(self):
        if self.stage1_lr <= 0 or self.stage2_plugin_lr <= 0 or self.naive_plugin_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.stage2_trunk_lr <= self.stage1_lr:
            raise ConfigError("stage2_trunk_lr must lie in [0, stage1_lr]")
        if self.batch_size < 1 or (self.minibatch_size is not None and self.minibatch_size < 1):
            raise ConfigError("batch sizes must be >= 1")
        if self.plugin_variant not in VARIANTS:
            raise ConfigError(f"plugin_variant must be one of {VARIANTS}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        if self.stop_metric not in STOP_METRICS:
            raise ConfigError(f"stop_metric must be one of {STOP_METRICS}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self

    def minibatch_for(self, n: int) -> int:
        if self.minibatch_size is not None:
            return self.minibatch_size
        return max(1, self.batch_size // n)

    @property
    def plugin_lr(self) -> float:
        return self.naive_plugin_lr if self.plugin_variant == "naive" else self.stage2_plugin_lr

    def adam(self) -> Adam:
        return Adam(self.beta1, self.beta2, self.eps)


@dataclass
class TrainHistory:
    rows: List[dict] = field(default_factory=list)
    grad_norms: GradNormLog = field(default_factory=GradNormLog)

    def add(self, **row):
        self.rows.append(row)

    def write_csv(self, path) -> None:
        cols = ["epoch", "stage", "group", "loss", "metric", "val_loss"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c, "") for c in cols})


def _evaluate(trunk, plugins, val: SampleSet, assignment: GroupAssignment):
    """Validation BCE and pooled AUC, overall and per group."""
    groups = group_indices(val, assignment)
    logits = np.empty(len(val))
    for j, rows in groups.items():
        if not len(rows):
            continue
        batch = val.take(rows, group=j)
        plugin = plugins.get(j) if plugins else None
        logits[rows] = (logits_with(trunk, batch) if plugin is None
                        else plugin_logits(trunk, plugin, batch))
    p = sigmoid(logits)
    y = val.labels

    def score(rows):
        yy, pp = y[rows], p[rows]
        a = auc(pp[yy == 1], pp[yy == 0]) if (yy == 1).any() and (yy == 0).any() else None
        return bce_loss(pp, yy), a

    out = {"all": score(np.arange(len(val)))}
    for j, rows in groups.items():
        if len(rows):
            out[j] = score(rows)
    return out


def _regularize(config, trunk, grads):
    out = {k: g for k, g in grads.items() if k not in config.frozen}
    if config.weight_decay:
        for k in out:
            if trunk.sections[k] == "embedding":
                out[k] = out[k] + config.weight_decay * trunk.params[k]
    return out


def _map(fn, items, parallel):
    if not parallel or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        return list(pool.map(fn, items))


class _Stopper:
    """Tracks the best validation score (lower is better) and its parameter snapshot."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_state = None
        self.bad = 0

    def update(self, loss, snapshot: Callable):
        if loss < self.best:
            self.best, self.bad = loss, 0
            self.best_state = snapshot()
            return False
        self.bad += 1
        return self.bad >= self.patience


def _check_groups(train: SampleSet, assignment: GroupAssignment):
    groups = group_indices(train, assignment)
    empty = [j for j, rows in groups.items() if len(rows) == 0]
    if empty:
        raise ConfigError(f"groups {empty} have no training samples")
    if any(assignment.counts[j] <= 0 for j in groups):
        raise ConfigError("every group needs a positive sample count")


def train_stage1(config: TrainConfig, train: SampleSet, assignment: GroupAssignment,
                 trunk: TrunkParams, val: Optional[SampleSet] = None,
                 history: Optional[TrainHistory] = None,
                 checkpoint_dir=None) -> TrunkParams:
    """Trunk training with one aggregated update per global batch.

    Stops after ``epochs_stage1`` epochs or once validation loss fails to
    improve for ``patience`` epochs, restoring the best validation state.
    """
    config.validate()
    _check_groups(train, assignment)
    history = history if history is not None else TrainHistory()
    trunk = trunk.copy()
    weights = GroupWeights.from_assignment(assignment)
    shapes = {k: v.shape for k, v in trunk.params.items()}
    opt = config.adam()
    mb = config.minibatch_for(assignment.n)
    stopper = _Stopper(config.patience)

    for epoch in range(config.epochs_stage1):
        losses: Dict[int, list] = {j: [] for j in range(1, assignment.n + 1)}
        seed = [config.seed, 1, epoch]
        for b, minibatches in enumerate(split_batch(train, assignment, mb, seed=seed)):
            results = _map(lambda m: backward(trunk, m), minibatches, config.parallel)
            queue = GradientQueue(assignment.n, shapes)
            for m, (loss, grads) in zip(minibatches, results):
                queue.push(m.group, grads)
                losses[m.group].append(loss)
            if config.record_grad_norms:
                history.grad_norms.record("stage1", epoch, b, queue.peek())
            opt.step(trunk.params, _regularize(config, trunk, aggregate(queue, weights)),
                     config.stage1_lr)
        stop = _end_epoch(history, "stage1", epoch, losses, trunk, None, val, assignment,
                          stopper, lambda: {k: v.copy() for k, v in trunk.params.items()},
                          config.stop_metric)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"stage1_epoch{epoch}.npz", trunk,
                            optimizers={"trunk": opt},
                            meta={"stage": "stage1", "epoch": epoch, "config": asdict(config)})
        if stop:
            log.info("stage1: validation loss converged after epoch %d", epoch)
            break
    if stopper.best_state is not None:
        trunk.params = stopper.best_state
    return trunk


def _end_epoch(history, stage, epoch, losses, trunk, plugins, val, assignment, stopper,
               snapshot, stop_metric="val_loss"):
    for j, ls in losses.items():
        history.add(epoch=epoch, stage=stage, group=j, loss=float(np.mean(ls)) if ls else "")
    if val is None or len(val) == 0:
        return False
    scores = _evaluate(trunk, plugins, val, assignment)
    for key, (vloss, vauc) in scores.items():
        history.add(epoch=epoch, stage=stage, group=key, loss="", val_loss=vloss,
                    metric="" if vauc is None else vauc)
    vloss, vauc = scores["all"]
    log.info("%s epoch %d: val loss %.5f auc %s", stage, epoch, vloss, vauc)
    # a single-class validation set has no AUC; fall back to the loss
    target = -vauc if stop_metric == "val_auc" and vauc is not None else vloss
    return stopper.update(target, snapshot)


def init_plugins(config: TrainConfig, trunk: TrunkParams, n: int):
    if config.plugin_variant == "naive":
        return {j: init_naive(trunk, j) for j in range(1, n + 1)}
    return {j: init_light(trunk, j, seed=config.seed, scale=config.plugin_init_scale)
            for j in range(1, n + 1)}


def train_stage2(config: TrainConfig, train: SampleSet, assignment: GroupAssignment,
                 trunk: TrunkParams, val: Optional[SampleSet] = None,
                 history: Optional[TrainHistory] = None, plugins=None,
                 checkpoint_dir=None):
    """Per-group plugin training with continued aggregated trunk updates.

    Returns ``(trunk, plugins)``. Each plugin and the trunk get their own
    fresh Adam state.
    """
    config.validate()
    _check_groups(train, assignment)
    history = history if history is not None else TrainHistory()
    trunk = trunk.copy()
    if plugins is None:
        plugins = init_plugins(config, trunk, assignment.n)
    else:
        plugins = {j: type(p)(p.group, {k: v.copy() for k, v in p.params.items()})
                   for j, p in plugins.items()}
    if sorted(plugins) != list(range(1, assignment.n + 1)):
        raise ConfigError("need exactly one plugin per group")
    for p in plugins.values():
        try:
            check_plugin(trunk, p)
        except (ValueError, KeyError) as exc:
            raise StateError(f"plugin {p.group} does not fit the trunk: {exc}") from None
    weights = GroupWeights.from_assignment(assignment)
    shapes = {k: v.shape for k, v in trunk.params.items()}
    trunk_opt = config.adam()
    plugin_opts = {j: config.adam() for j in plugins}
    mb = config.minibatch_for(assignment.n)
    plugin_lr = config.plugin_lr
    stopper = _Stopper(config.patience)

    def snapshot():
        return ({k: v.copy() for k, v in trunk.params.items()},
                {j: {k: v.copy() for k, v in p.params.items()} for j, p in plugins.items()})

    def group_step(m):
        loss, pgrads, tgrads = plugin_backward(trunk, plugins[m.group], m)
        plugin_opts[m.group].step(plugins[m.group].params, pgrads, plugin_lr)
        return loss, tgrads

    for epoch in range(config.epochs_stage2):
        losses: Dict[int, list] = {j: [] for j in plugins}
        seed = [config.seed, 2, epoch]
        for b, minibatches in enumerate(split_batch(train, assignment, mb, seed=seed)):
            results = _map(group_step, minibatches, config.parallel)
            queue = GradientQueue(assignment.n, shapes)
            for m, (loss, tgrads) in zip(minibatches, results):
                queue.push(m.group, tgrads)
                losses[m.group].append(loss)
            if config.record_grad_norms:
                history.grad_norms.record("stage2", epoch, b, queue.peek())
            agg = aggregate(queue, weights)
            if config.stage2_trunk_lr > 0:
                trunk_opt.step(trunk.params, _regularize(config, trunk, agg),
                               config.stage2_trunk_lr)
        stop = _end_epoch(history, "stage2", epoch, losses, trunk, plugins, val, assignment,
                          stopper, snapshot, config.stop_metric)
        if checkpoint_dir is not None:
            opts = {"trunk": trunk_opt, **{f"plugin{j}": o for j, o in plugin_opts.items()}}
            save_checkpoint(Path(checkpoint_dir) / f"stage2_epoch{epoch}.npz", trunk, plugins,
                            optimizers=opts,
                            meta={"stage": "stage2", "epoch": epoch, "config": asdict(config)})
        if stop:
            log.info("stage2: validation loss converged after epoch %d", epoch)
            break
    if stopper.best_state is not None:
        tparams, pparams = stopper.best_state
        trunk.params = tparams
        for j, p in pparams.items():
            plugins[j].params = p
    return trunk, plugins
