"""Gradient memory queue and activeness-deconfounded gradient aggregation.

Each global batch contributes one mean gradient per activeness group. The
aggregated gradient is

    g = sum_j  P(z=j) * (N / n_j) * g_j

which, under the default uniform prior P(z=j) = 1/n, reduces to
``(1/n) * sum_j (N / n_j) * g_j``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import QueueStateError
from .numeric import GradMap


@dataclass(frozen=True)
class GroupWeights:
    n: int
    N: int
    counts: Tuple[int, ...]
    prior: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if len(self.counts) != self.n:
            raise ValueError(f"expected {self.n} group counts, got {len(self.counts)}")
        if any(c <= 0 for c in self.counts):
            raise ValueError("group counts must be positive")
        if self.prior is not None:
            if len(self.prior) != self.n:
                raise ValueError("prior length must equal n")
            if any(p < 0 for p in self.prior) or not np.isclose(sum(self.prior), 1.0):
                raise ValueError("prior must be a probability vector")

    @classmethod
    def from_assignment(cls, assignment, prior=None) -> "GroupWeights":
        counts = tuple(assignment.counts[j] for j in range(1, assignment.n + 1))
        return cls(assignment.n, assignment.total, counts,
                   None if prior is None else tuple(float(p) for p in prior))

    def prior_of(self, j: int) -> float:
        return 1.0 / self.n if self.prior is None else self.prior[j - 1]


def effective_weight(weights: GroupWeights, j: int) -> float:
    """Coefficient applied to group ``j``'s gradient: P(z=j) * N / n_j."""
    if not 1 <= j <= weights.n:
        raise ValueError(f"unknown group {j}; expected 1..{weights.n}")
    n_j = weights.counts[j - 1]
    if weights.prior is None:
        # single division keeps N / (n * n_j) exactly 1.0 when groups are equal
        return weights.N / (weights.n * n_j)
    return weights.prior[j - 1] * weights.N / n_j


class GradientQueue:
    """Holds at most one gradient per group until the batch is complete."""

    def __init__(self, capacity: int, shapes: Optional[Mapping[str, tuple]] = None):
        self.capacity = capacity
        self.shapes = dict(shapes) if shapes is not None else None
        self._slots: Dict[int, GradMap] = {}

    def __len__(self):
        return len(self._slots)

    @property
    def groups(self):
        return sorted(self._slots)

    @property
    def ready(self) -> bool:
        return len(self._slots) == self.capacity

    def push(self, j: int, grads: GradMap) -> "GradientQueue":
        if j in self._slots:
            raise QueueStateError(f"group {j} already has a gradient in the queue")
        if not 1 <= j <= self.capacity:
            raise ValueError(f"group {j} outside 1..{self.capacity}")
        if self.shapes is not None:
            for name, g in grads.items():
                if name not in self.shapes:
                    raise ValueError(f"unknown parameter {name!r}")
                if g.shape != tuple(self.shapes[name]):
                    raise ValueError(f"shape mismatch for {name}: {g.shape} vs {self.shapes[name]}")
        self._slots[j] = grads
        return self

    def peek(self) -> Dict[int, GradMap]:
        return dict(self._slots)

    def drain(self) -> Dict[int, GradMap]:
        slots, self._slots = self._slots, {}
        return slots


def aggregate(queue: GradientQueue, weights: GroupWeights) -> GradMap:
    """Deconfounded gradient of a completed queue; clears the queue."""
    if not queue.ready:
        raise QueueStateError(
            f"queue holds {len(queue)} of {queue.capacity} group gradients; cannot aggregate")
    if queue.capacity != weights.n:
        raise ValueError("queue capacity and group weights disagree on n")
    slots = queue.drain()
    names = list(slots[min(slots)])
    out: GradMap = {}
    for name in names:
        acc = None
        for j in sorted(slots):
            term = effective_weight(weights, j) * slots[j][name]
            acc = term if acc is None else acc + term
        out[name] = acc
    return out


def grad_norms(slots: Mapping[int, GradMap]) -> Dict[int, float]:
    return {j: float(np.sqrt(sum(float(np.sum(g * g)) for g in gm.values())))
            for j, gm in sorted(slots.items())}


class GradNormLog:
    """Optional per-batch, per-group gradient-norm dump for diagnosing group conflict."""

    def __init__(self):
        self.rows = []

    def record(self, stage: str, epoch: int, batch: int, slots: Mapping[int, GradMap]):
        for j, norm in grad_norms(slots).items():
            self.rows.append((stage, epoch, batch, j, norm))

    def write(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "epoch", "batch", "group", "grad_norm"])
            w.writerows(self.rows)
