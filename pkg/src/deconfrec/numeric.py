"""Dense numeric kernels shared by every backbone.

Everything runs in float64. ``GradMap`` is a plain ``dict`` from parameter
name to an array shaped like the parameter it differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Mapping

import numpy as np

from .errors import NumericError

GradMap = Dict[str, np.ndarray]

SECTIONS = ("embedding", "extractor", "classifier")
LOG_EPS = 1e-12


@dataclass
class ParamTensor:
    name: str
    data: np.ndarray
    section: str

    def __post_init__(self):
        if self.section not in SECTIONS:
            raise ValueError(f"unknown section {self.section!r} for {self.name}")
        self.data = np.asarray(self.data, dtype=np.float64)


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep strictly inside (0, 1) even where float64 saturates
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def bce_loss(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise ValueError("empty batch")
    p = np.clip(preds, LOG_EPS, 1.0 - LOG_EPS)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def bce_with_logits(logits, labels):
    """Mean BCE of sigmoid(logits) and d(loss)/d(logit) = (p - y) / batch."""
    p = sigmoid(logits)
    labels = np.asarray(labels, dtype=np.float64)
    return bce_loss(p, labels), (p - labels) / labels.size, p


def finite_diff_grad(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
) -> GradMap:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``params`` is perturbed in place one scalar at a time and restored
    afterwards, so ``loss_fn`` must read the arrays it is handed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads: GradMap = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn(params)
            flat[idx] = orig - eps
            down = loss_fn(params)
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while differentiating {name}[{idx}]")
            gflat[idx] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def max_rel_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                  floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor) over all shared entries."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
