"""Per-group plugin networks.

Naive plugins are parameter residuals added to the extractor and classifier
(never to the embeddings). Lightweight plugins insert two residual linear
adapters: ``A`` on every looked-up embedding vector (d -> d) and ``B`` on the
extractor output (h -> h).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Union

import numpy as np

from .models import Batch, TrunkParams, loss_and_grads, logits_with
from .numeric import sigmoid

PLUGIN_SECTIONS = ("extractor", "classifier")


@dataclass
class NaivePlugin:
    group: int
    params: Dict[str, np.ndarray]
    kind: str = "naive"


@dataclass
class LightPlugin:
    group: int
    params: Dict[str, np.ndarray]
    kind: str = "light"


Plugin = Union[NaivePlugin, LightPlugin]


def init_naive(trunk: TrunkParams, group: int = 1) -> NaivePlugin:
    names = [k for k in trunk.params if trunk.sections[k] in PLUGIN_SECTIONS]
    return NaivePlugin(group, {k: np.zeros_like(trunk.params[k]) for k in names})


def init_light(trunk: TrunkParams, group: int = 1, seed: int = 0, scale: float = 1e-3,
               exact_zero: bool = False) -> LightPlugin:
    """Adapters with weights ~ U(-scale, scale) and zero biases (all zero if ``exact_zero``)."""
    d, h = trunk.dims.d, trunk.dims.h
    rng = np.random.default_rng([seed, group])

    def w(n):
        if exact_zero:
            return np.zeros((n, n))
        return rng.uniform(-scale, scale, size=(n, n))

    return LightPlugin(group, {"pa.w": w(d), "pa.b": np.zeros(d),
                               "pb.w": w(h), "pb.b": np.zeros(h)})


def check_plugin(trunk: TrunkParams, plugin: Plugin) -> None:
    if isinstance(plugin, NaivePlugin):
        for name, delta in plugin.params.items():
            if name not in trunk.params:
                raise ValueError(f"residual {name!r} has no trunk counterpart")
            if trunk.sections[name] not in PLUGIN_SECTIONS:
                raise ValueError(f"residual {name!r} targets the {trunk.sections[name]} section")
            if delta.shape != trunk.params[name].shape:
                raise ValueError(f"residual shape mismatch for {name}: "
                                 f"{delta.shape} vs {trunk.params[name].shape}")
    else:
        d, h = trunk.dims.d, trunk.dims.h
        expected = {"pa.w": (d, d), "pa.b": (d,), "pb.w": (h, h), "pb.b": (h,)}
        for name, shape in expected.items():
            if plugin.params[name].shape != shape:
                raise ValueError(f"adapter {name} shape {plugin.params[name].shape} != {shape}")


def _check_group(plugin: Plugin, batch: Batch) -> None:
    if batch.group is not None and batch.group != plugin.group:
        raise ValueError(f"plugin for group {plugin.group} applied to a group-{batch.group} batch")


def summed_params(trunk: TrunkParams, plugin: NaivePlugin) -> Dict[str, np.ndarray]:
    out = dict(trunk.params)
    for name, delta in plugin.params.items():
        out[name] = trunk.params[name] + delta
    return out


def plugin_logits(trunk: TrunkParams, plugin: Plugin, batch: Batch) -> np.ndarray:
    _check_group(plugin, batch)
    check_plugin(trunk, plugin)
    if isinstance(plugin, NaivePlugin):
        return logits_with(trunk, batch, params=summed_params(trunk, plugin))
    return logits_with(trunk, batch, adapter=plugin.params)


def predict_naive(trunk: TrunkParams, plugin: NaivePlugin, batch: Batch) -> np.ndarray:
    return sigmoid(plugin_logits(trunk, plugin, batch))


def predict_light(trunk: TrunkParams, plugin: LightPlugin, batch: Batch) -> np.ndarray:
    return sigmoid(plugin_logits(trunk, plugin, batch))


def predict_with(trunk: TrunkParams, plugin: Plugin, batch: Batch) -> np.ndarray:
    return sigmoid(plugin_logits(trunk, plugin, batch))


def plugin_backward(trunk: TrunkParams, plugin: Plugin, batch: Batch):
    """Loss of the plugin-augmented forward, plugin gradients, and trunk gradients.

    Trunk gradients are taken through the augmented forward and are meant for
    the gradient queue; they are never applied by this function.
    """
    _check_group(plugin, batch)
    check_plugin(trunk, plugin)
    if isinstance(plugin, NaivePlugin):
        loss, grads, _ = loss_and_grads(trunk, batch, params=summed_params(trunk, plugin))
        plugin_grads = {k: grads[k].copy() for k in plugin.params}
        return loss, plugin_grads, grads
    loss, grads, agrads = loss_and_grads(trunk, batch, adapter=plugin.params)
    return loss, agrads, grads


def predict_routed(trunk: TrunkParams, plugins, samples, group_of) -> np.ndarray:
    """Scores for every row of ``samples``, each through its user's group plugin.

    ``plugins`` maps group id -> plugin; rows whose group has no plugin (or an
    empty ``plugins``) use the bare trunk.
    """
    from .models import predict

    users = np.asarray(samples.users)
    gid = np.array([group_of(int(u)) for u in users], dtype=np.int64)
    out = np.empty(len(users))
    for j in np.unique(gid):
        rows = np.flatnonzero(gid == j)
        batch = samples.take(rows, group=int(j))
        plugin = plugins.get(int(j)) if plugins else None
        out[rows] = predict(trunk, batch) if plugin is None else predict_with(trunk, plugin, batch)
    return out
