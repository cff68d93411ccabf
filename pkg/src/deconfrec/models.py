"""Sequential CTR backbones with hand-derived gradients.

Wiring shared by all architectures::

    e_u, e_i, e_s  = embedding lookups          (section "embedding")
    [adapter A]    = e + e @ Wa + ba, applied to every looked-up vector
    pooled         = pool(e_s | e_i)            avg-pool / target-attention / GRU
    x              = concat(e_u, e_i, pooled [, e_u*e_i, pooled*e_i])
    z              = act(... act(x @ W1 + b1) ...)   (section "extractor")
    [adapter B]    = z + z @ Wb + bb
    logit          = z @ w + b                  (section "classifier")

The bracketed product terms are present when ``cross_features`` is on; the
history product needs a pooled vector of size d, so the recurrent backbone
gets it only when h == d. With ``user_embedding`` off the user is represented
by the click history alone and ``e_u`` terms drop out. Adapters are only present when a lightweight plugin is supplied. Sequences
are left-padded with ``PAD`` (-1); padded steps are masked out everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, List, Mapping, Optional

import numpy as np

from .numeric import GradMap, ParamTensor, bce_with_logits, sigmoid

PAD = -1
ARCHS = ("avg-pool", "recurrent", "target-attention")
ACTIVATIONS = ("tanh", "identity")
GRU_GATES = ("z", "r", "n")


@dataclass(frozen=True)
class ModelDims:
    n_users: int
    n_items: int
    d: int = 8
    h: int = 16
    L: int = 20
    ext_layers: int = 1
    activation: str = "tanh"
    cross_features: bool = True
    user_embedding: bool = True

    def __post_init__(self):
        for name in ("n_users", "n_items", "d", "h", "L", "ext_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class TrunkParams:
    arch: str
    dims: ModelDims
    params: Dict[str, np.ndarray]
    sections: Dict[str, str]

    def names(self, section: Optional[str] = None) -> List[str]:
        return [k for k in self.params if section is None or self.sections[k] == section]

    def tensors(self, section: str) -> List[ParamTensor]:
        return [ParamTensor(k, self.params[k], section) for k in self.names(section)]

    @property
    def embedding(self) -> List[ParamTensor]:
        return self.tensors("embedding")

    @property
    def extractor(self) -> List[ParamTensor]:
        return self.tensors("extractor")

    @property
    def classifier(self) -> List[ParamTensor]:
        return self.tensors("classifier")

    def copy(self) -> "TrunkParams":
        return TrunkParams(self.arch, self.dims, {k: v.copy() for k, v in self.params.items()},
                           dict(self.sections))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "TrunkParams":
        return TrunkParams(self.arch, self.dims, dict(params), dict(self.sections))

    def describe(self) -> dict:
        return {"arch": self.arch, "dims": asdict(self.dims)}


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    sequences: np.ndarray
    labels: np.ndarray
    group: Optional[int] = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64).ravel()
        self.items = np.asarray(self.items, dtype=np.int64).ravel()
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim == 1:
            self.sequences = self.sequences.reshape(len(self.users), -1)
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        n = len(self.users)
        if not (len(self.items) == n == len(self.labels) == self.sequences.shape[0]):
            raise ValueError("batch fields must be parallel arrays of equal length")

    def __len__(self):
        return len(self.users)

    @property
    def mask(self) -> np.ndarray:
        return (self.sequences != PAD).astype(np.float64)


def _pooled_dim(arch: str, dims: ModelDims) -> int:
    return dims.h if arch == "recurrent" else dims.d


def _history_cross(arch: str, dims: ModelDims) -> bool:
    return dims.cross_features and _pooled_dim(arch, dims) == dims.d


def input_width(arch: str, dims: ModelDims) -> int:
    width = dims.d + _pooled_dim(arch, dims)
    if dims.user_embedding:
        width += dims.d * (2 if dims.cross_features else 1)
    if _history_cross(arch, dims):
        width += dims.d
    return width


def build_model(arch: str, n_users: int, n_items: int, d: int = 8, h: int = 16, L: int = 20,
                seed: int = 0, ext_layers: int = 1, activation: str = "tanh",
                cross_features: bool = True, user_embedding: bool = True) -> TrunkParams:
    """Initialize a backbone: weights ~ U(-0.1, 0.1), biases zero."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    dims = ModelDims(n_users, n_items, d, h, L, ext_layers, activation, cross_features,
                     user_embedding)
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    params: Dict[str, np.ndarray] = {}
    sections: Dict[str, str] = {}

    def add(name, value, section):
        params[name] = np.asarray(value, dtype=np.float64)
        sections[name] = section

    if user_embedding:
        add("emb.user", u(n_users, d), "embedding")
    add("emb.item", u(n_items, d), "embedding")
    if arch == "target-attention":
        add("ext.att.w1", u(3 * d, h), "extractor")
        add("ext.att.b1", np.zeros(h), "extractor")
        add("ext.att.w2", u(h), "extractor")
    elif arch == "recurrent":
        for g in GRU_GATES:
            add(f"ext.gru.w{g}", u(d, h), "extractor")
            add(f"ext.gru.u{g}", u(h, h), "extractor")
            add(f"ext.gru.b{g}", np.zeros(h), "extractor")
    width = input_width(arch, dims)
    for k in range(ext_layers):
        add(f"ext.mlp{k}.w", u(width, h), "extractor")
        add(f"ext.mlp{k}.b", np.zeros(h), "extractor")
        width = h
    add("cls.w", u(h), "classifier")
    add("cls.b", np.zeros(1), "classifier")
    return TrunkParams(arch, dims, params, sections)


def validate_batch(dims: ModelDims, batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.users.min() < 0 or batch.users.max() >= dims.n_users:
        raise ValueError("user id out of vocabulary")
    if batch.items.min() < 0 or batch.items.max() >= dims.n_items:
        raise ValueError("item id out of vocabulary")
    seq = batch.sequences
    if seq.shape[1] > dims.L:
        raise ValueError(f"sequence length {seq.shape[1]} exceeds L={dims.L}")
    if seq.size and (seq.max() >= dims.n_items or seq.min() < PAD):
        raise ValueError("sequence item id out of vocabulary")


def _act(name, a):
    return np.tanh(a) if name == "tanh" else a


def _act_grad(name, out):
    return 1.0 - out * out if name == "tanh" else np.ones_like(out)


# --------------------------------------------------------------------- forward

def _adapt(vec, adapter, key):
    if adapter is None:
        return vec
    return vec + vec @ adapter[f"{key}.w"] + adapter[f"{key}.b"]


def _forward(arch, dims, p, batch, adapter):
    cache = {}
    mask = batch.mask
    seq_idx = np.where(batch.sequences == PAD, 0, batch.sequences)
    ei = p["emb.item"][batch.items]
    es = p["emb.item"][seq_idx]
    cache.update(ei=ei, es=es, mask=mask, seq_idx=seq_idx)
    ei, es = _adapt(ei, adapter, "pa"), _adapt(es, adapter, "pa")
    cache.update(ei_a=ei, es_a=es)
    eu = None
    if dims.user_embedding:
        eu = p["emb.user"][batch.users]
        cache["eu"] = eu
        eu = cache["eu_a"] = _adapt(eu, adapter, "pa")

    if arch == "avg-pool":
        length = np.maximum(mask.sum(1), 1.0)
        pooled = (es * mask[:, :, None]).sum(1) / length[:, None]
        cache["length"] = length
    elif arch == "target-attention":
        tgt = np.broadcast_to(ei[:, None, :], es.shape)
        X = np.concatenate([es, tgt, es * tgt], axis=2)
        H = np.tanh(X @ p["ext.att.w1"] + p["ext.att.b1"])
        s = H @ p["ext.att.w2"]
        s = np.where(mask > 0, s, -np.inf)
        smax = np.max(s, axis=1, keepdims=True)
        smax = np.where(np.isfinite(smax), smax, 0.0)
        w = np.exp(s - smax) * mask
        denom = w.sum(1, keepdims=True)
        alpha = w / np.where(denom > 0, denom, 1.0)
        pooled = (alpha[:, :, None] * es).sum(1)
        cache.update(X=X, H=H, alpha=alpha)
    else:
        B, L = mask.shape
        hstate = np.zeros((B, dims.h))
        steps = []
        for t in range(L):
            x_t = es[:, t]
            m = mask[:, t:t + 1]
            zg = sigmoid(x_t @ p["ext.gru.wz"] + hstate @ p["ext.gru.uz"] + p["ext.gru.bz"])
            rg = sigmoid(x_t @ p["ext.gru.wr"] + hstate @ p["ext.gru.ur"] + p["ext.gru.br"])
            rh = rg * hstate
            ng = np.tanh(x_t @ p["ext.gru.wn"] + rh @ p["ext.gru.un"] + p["ext.gru.bn"])
            hnew = (1.0 - zg) * ng + zg * hstate
            steps.append((hstate, zg, rg, rh, ng, m))
            hstate = m * hnew + (1.0 - m) * hstate
        pooled = hstate
        cache["steps"] = steps

    parts = [eu, ei, pooled] if eu is not None else [ei, pooled]
    if eu is not None and dims.cross_features:
        parts.append(eu * ei)
    if _history_cross(arch, dims):
        parts.append(pooled * ei)
    cache["pooled"] = pooled
    x = np.concatenate(parts, axis=1)
    acts = [x]
    for k in range(dims.ext_layers):
        x = _act(dims.activation, x @ p[f"ext.mlp{k}.w"] + p[f"ext.mlp{k}.b"])
        acts.append(x)
    cache["acts"] = acts
    z = _adapt(x, adapter, "pb")
    cache["z_a"] = z
    logits = z @ p["cls.w"] + p["cls.b"][0]
    return logits, cache


# -------------------------------------------------------------------- backward

def _adapter_back(grad_out, vec_in, adapter, key, agrads):
    """Backprop through v + v @ W + b; accumulates into agrads, returns d(vec_in)."""
    w = adapter[f"{key}.w"]
    flat_in = vec_in.reshape(-1, vec_in.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    agrads[f"{key}.w"] += flat_in.T @ flat_g
    agrads[f"{key}.b"] += flat_g.sum(0)
    return grad_out + grad_out @ w.T


def _backward(arch, dims, p, batch, adapter, cache, dlogit):
    g: GradMap = {k: np.zeros_like(v) for k, v in p.items()}
    agrads = None
    if adapter is not None:
        agrads = {k: np.zeros_like(v) for k, v in adapter.items()}
    mask = cache["mask"]
    z = cache["z_a"]
    g["cls.w"] = z.T @ dlogit
    g["cls.b"] = np.array([dlogit.sum()])
    dz = dlogit[:, None] * p["cls.w"][None, :]
    acts = cache["acts"]
    if adapter is not None:
        dz = _adapter_back(dz, acts[-1], adapter, "pb", agrads)
    for k in reversed(range(dims.ext_layers)):
        out = acts[k + 1]
        da = dz * _act_grad(dims.activation, out)
        g[f"ext.mlp{k}.w"] = acts[k].T @ da
        g[f"ext.mlp{k}.b"] = da.sum(0)
        dz = da @ p[f"ext.mlp{k}.w"].T
    d = dims.d
    pw = _pooled_dim(arch, dims)
    es, ei = cache["es_a"], cache["ei_a"]
    has_user = dims.user_embedding
    off = 0
    if has_user:
        eu = cache["eu_a"]
        deu = dz[:, :d].copy()
        off = d
    dei = dz[:, off:off + d].copy()
    dpooled = dz[:, off + d:off + d + pw].copy()
    off += d + pw
    if has_user and dims.cross_features:
        dc = dz[:, off:off + d]
        deu += dc * ei
        dei += dc * eu
        off += d
    if _history_cross(arch, dims):
        dc = dz[:, off:off + d]
        dpooled += dc * ei
        dei += dc * cache["pooled"]

    if arch == "avg-pool":
        des = mask[:, :, None] * dpooled[:, None, :] / cache["length"][:, None, None]
    elif arch == "target-attention":
        alpha, H, X = cache["alpha"], cache["H"], cache["X"]
        des = alpha[:, :, None] * dpooled[:, None, :]
        dalpha = np.einsum("bld,bd->bl", es, dpooled)
        ds = alpha * (dalpha - (alpha * dalpha).sum(1, keepdims=True))
        g["ext.att.w2"] = np.einsum("blh,bl->h", H, ds)
        dpre = ds[:, :, None] * p["ext.att.w2"][None, None, :] * (1.0 - H * H)
        g["ext.att.w1"] = np.einsum("blk,blh->kh", X, dpre)
        g["ext.att.b1"] = dpre.sum((0, 1))
        dX = dpre @ p["ext.att.w1"].T
        dX_s, dX_t, dX_p = dX[:, :, :d], dX[:, :, d:2 * d], dX[:, :, 2 * d:]
        des = des + dX_s + dX_p * ei[:, None, :]
        dei += (dX_t + dX_p * es).sum(1)
    else:
        des = np.zeros_like(es)
        dh = dpooled
        for t in reversed(range(mask.shape[1])):
            hprev, zg, rg, rh, ng, m = cache["steps"][t]
            dhnew = m * dh
            dh_prev = (1.0 - m) * dh + dhnew * zg
            dzg = dhnew * (hprev - ng)
            dng = dhnew * (1.0 - zg)
            dan = dng * (1.0 - ng * ng)
            drh = dan @ p["ext.gru.un"].T
            drg = drh * hprev
            dh_prev += drh * rg
            dar = drg * rg * (1.0 - rg)
            daz = dzg * zg * (1.0 - zg)
            x_t = es[:, t]
            for gate, da, hin in (("z", daz, hprev), ("r", dar, hprev), ("n", dan, rh)):
                g[f"ext.gru.w{gate}"] += x_t.T @ da
                g[f"ext.gru.u{gate}"] += hin.T @ da
                g[f"ext.gru.b{gate}"] += da.sum(0)
            des[:, t] = (daz @ p["ext.gru.wz"].T + dar @ p["ext.gru.wr"].T
                         + dan @ p["ext.gru.wn"].T)
            dh_prev += daz @ p["ext.gru.uz"].T + dar @ p["ext.gru.ur"].T
            dh = dh_prev

    des = des * mask[:, :, None]
    if adapter is not None:
        if has_user:
            deu = _adapter_back(deu, cache["eu"], adapter, "pa", agrads)
        dei = _adapter_back(dei, cache["ei"], adapter, "pa", agrads)
        des = _adapter_back(des, cache["es"], adapter, "pa", agrads) * mask[:, :, None]
    if has_user:
        np.add.at(g["emb.user"], batch.users, deu)
    np.add.at(g["emb.item"], batch.items, dei)
    valid = mask > 0
    np.add.at(g["emb.item"], cache["seq_idx"][valid], des[valid])
    return g, agrads


# ------------------------------------------------------------------ public API

def logits_with(trunk: TrunkParams, batch: Batch, params=None, adapter=None) -> np.ndarray:
    validate_batch(trunk.dims, batch)
    logits, _ = _forward(trunk.arch, trunk.dims, params or trunk.params, batch, adapter)
    return logits


def predict(trunk: TrunkParams, batch: Batch) -> np.ndarray:
    return sigmoid(logits_with(trunk, batch))


def loss_and_grads(trunk: TrunkParams, batch: Batch, params=None, adapter=None):
    """Loss plus analytic gradients w.r.t. ``params`` (default: trunk) and ``adapter``."""
    validate_batch(trunk.dims, batch)
    params = params or trunk.params
    logits, cache = _forward(trunk.arch, trunk.dims, params, batch, adapter)
    loss, dlogit, _ = bce_with_logits(logits, batch.labels)
    grads, agrads = _backward(trunk.arch, trunk.dims, params, batch, adapter, cache, dlogit)
    return loss, grads, agrads


def backward(trunk: TrunkParams, batch: Batch):
    """Mean BCE loss and its exact gradient for every trunk parameter."""
    loss, grads, _ = loss_and_grads(trunk, batch)
    return loss, grads
