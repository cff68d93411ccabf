"""User activeness, activeness-ordered grouping with balanced sample mass, and
per-group mini-batch streams."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional

import numpy as np

from .data import SampleSet

MODES = ("sample-count", "sequence-length")


@dataclass(frozen=True)
class ActivenessIndex:
    values: Dict[int, int]
    mode: str


@dataclass
class GroupAssignment:
    group_of: Dict[int, int]
    counts: Dict[int, int]
    total: int
    n: int
    # activeness range [lo, hi] covered by each group, for unseen users
    ranges: Dict[int, tuple] = field(default_factory=dict)

    def group_for(self, user: int, activeness: Optional[int] = None) -> int:
        if user in self.group_of:
            return self.group_of[user]
        if activeness is None:
            raise KeyError(f"user {user} has no group and no activeness was given")
        return nearest_group(self.ranges, activeness)

    def users_in(self, j: int) -> List[int]:
        return sorted(u for u, g in self.group_of.items() if g == j)


def nearest_group(ranges: Mapping[int, tuple], activeness: int) -> int:
    best, best_gap = None, None
    for j in sorted(ranges):
        lo, hi = ranges[j]
        gap = 0 if lo <= activeness <= hi else min(abs(activeness - lo), abs(activeness - hi))
        if best_gap is None or gap < best_gap:
            best, best_gap = j, gap
    return best


def compute_activeness(source, mode: str = "sample-count") -> ActivenessIndex:
    """Per-user activeness from an :class:`InteractionLog` or a :class:`SampleSet`.

    ``sample-count`` counts every sample (positives and negatives) of the user;
    ``sequence-length`` counts the user's clicks, i.e. positive samples.
    """
    if mode not in MODES:
        raise ValueError(f"unknown activeness mode {mode!r}; expected one of {MODES}")
    if len(source) == 0:
        raise ValueError("cannot compute activeness of an empty log")
    users = np.asarray(source.users)
    if mode == "sequence-length":
        users = users[np.asarray(source.labels) == 1]
        present = np.unique(source.users)
    else:
        present = np.unique(users)
    uniq, cnt = np.unique(users, return_counts=True)
    values = {int(u): 0 for u in present}
    values.update({int(u): int(c) for u, c in zip(uniq, cnt)})
    return ActivenessIndex(values, mode)


def sample_counts(samples) -> Dict[int, int]:
    uniq, cnt = np.unique(np.asarray(samples.users), return_counts=True)
    return {int(u): int(c) for u, c in zip(uniq, cnt)}


def assign_groups(idx: ActivenessIndex, n: int, counts: Mapping[int, int]) -> GroupAssignment:
    """Cut activeness-sorted users into ``n`` contiguous groups.

    Users are ordered by (activeness, user id); cut ``j`` is placed where the
    cumulative sample count is closest to ``j * N / n``, keeping every group
    nonempty.
    """
    users = sorted(idx.values, key=lambda u: (idx.values[u], u))
    if not 1 <= n <= len(users):
        raise ValueError(f"group count n={n} must lie in [1, {len(users)}]")
    missing = [u for u in users if u not in counts]
    if missing:
        raise ValueError(f"no sample count for users {missing[:5]}")
    mass = np.array([counts[u] for u in users], dtype=np.int64)
    cum = np.cumsum(mass)
    N = int(cum[-1])
    cuts = []
    prev = 0
    for j in range(1, n):
        lo, hi = prev + 1, len(users) - (n - j)
        # cut c means users[:c] precede the boundary
        cand = np.arange(lo, hi + 1)
        dist = np.abs(cum[cand - 1] * n - j * N)
        c = int(cand[np.argmin(dist)])
        cuts.append(c)
        prev = c
    bounds = [0] + cuts + [len(users)]
    group_of, cnts, ranges = {}, {}, {}
    for j in range(1, n + 1):
        seg = users[bounds[j - 1]:bounds[j]]
        for u in seg:
            group_of[u] = j
        cnts[j] = int(mass[bounds[j - 1]:bounds[j]].sum())
        ranges[j] = (idx.values[seg[0]], idx.values[seg[-1]])
    return GroupAssignment(group_of, cnts, N, n, ranges)


def write_assignment(assignment: GroupAssignment, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "group"])
        for u in sorted(assignment.group_of):
            w.writerow([u, assignment.group_of[u]])


def read_assignment(path, samples) -> GroupAssignment:
    """Rebuild an assignment from its CSV; counts come from ``samples``."""
    group_of = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            group_of[int(row[0])] = int(row[1])
    n = max(group_of.values())
    per_user = sample_counts(samples)
    counts = {j: 0 for j in range(1, n + 1)}
    for u, c in per_user.items():
        counts[group_of[u]] += c
    act = compute_activeness(samples, "sample-count").values
    ranges = {}
    for j in range(1, n + 1):
        vals = [act.get(u, 0) for u, g in group_of.items() if g == j]
        ranges[j] = (min(vals), max(vals))
    return GroupAssignment(group_of, counts, sum(counts.values()), n, ranges)


def group_indices(samples: SampleSet, assignment: GroupAssignment) -> Dict[int, np.ndarray]:
    """Sample row indices of each group (ascending)."""
    try:
        gid = np.array([assignment.group_of[int(u)] for u in samples.users], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"user {exc.args[0]} is absent from the group assignment") from None
    return {j: np.flatnonzero(gid == j) for j in range(1, assignment.n + 1)}


def split_batch(samples: SampleSet, assignment: GroupAssignment, minibatch_size: int,
                seed: int = 0) -> Iterator[List]:
    """Yield one list of ``n`` per-group mini-batches per global batch.

    Each group draws from its own shuffled stream; smaller groups reshuffle and
    cycle until the largest group has been consumed once. With ``n = 1`` this
    is plain shuffled batching.
    """
    if minibatch_size < 1:
        raise ValueError("minibatch_size must be >= 1")
    rng = np.random.default_rng(seed)
    groups = group_indices(samples, assignment)
    empty = [j for j, ix in groups.items() if len(ix) == 0]
    if empty:
        raise ValueError(f"groups {empty} have no samples")
    streams = {j: rng.permutation(ix) for j, ix in groups.items()}
    cursor = {j: 0 for j in groups}
    largest = max(len(ix) for ix in groups.values())
    n_batches = -(-largest // minibatch_size)
    for b in range(n_batches):
        out = []
        for j in sorted(groups):
            size = len(groups[j])
            if size == largest:
                want = min(minibatch_size, largest - b * minibatch_size)
            else:
                want = minibatch_size
            take = []
            while want > 0:
                if cursor[j] >= len(streams[j]):
                    streams[j] = rng.permutation(groups[j])
                    cursor[j] = 0
                chunk = streams[j][cursor[j]:cursor[j] + want]
                cursor[j] += len(chunk)
                want -= len(chunk)
                take.append(chunk)
            out.append((j, np.concatenate(take)))
        yield [samples.take(ix, group=j) for j, ix in out]
