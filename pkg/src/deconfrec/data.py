"""Interaction logs, leave-last-out splitting, negative sampling, sequences,
and a seeded long-tail synthetic generator."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError, ParseError
from .models import PAD, Batch
from .numeric import sigmoid

log = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "csv")
TEST_MODES = ("ratio-1-to-99", "all-negatives")


@dataclass
class InteractionLog:
    """Records sorted by (user, timestamp, original record index)."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    user_ids: List[str]
    item_ids: List[str]

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def subset(self, mask) -> "InteractionLog":
        return InteractionLog(self.users[mask], self.items[mask], self.timestamps[mask],
                              self.labels[mask], self.user_ids, self.item_ids)

    def user_slices(self) -> Dict[int, slice]:
        """Contiguous record range of every user present."""
        if not len(self):
            return {}
        bounds = np.flatnonzero(np.diff(self.users)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(self)]])
        return {int(self.users[s]): slice(int(s), int(e)) for s, e in zip(starts, ends)}


def from_records(records: Sequence[Tuple], user_ids=None, item_ids=None) -> InteractionLog:
    """Build a log from raw (user, item, timestamp[, label]) tuples, mapping ids densely
    in order of first appearance."""
    if not records:
        raise DataError("empty interaction log")
    umap: Dict[str, int] = {}
    imap: Dict[str, int] = {}
    if user_ids is not None:
        umap = {str(u): k for k, u in enumerate(user_ids)}
    if item_ids is not None:
        imap = {str(i): k for k, i in enumerate(item_ids)}
    n = len(records)
    users = np.empty(n, np.int64)
    items = np.empty(n, np.int64)
    ts = np.empty(n, np.int64)
    labels = np.ones(n, np.int64)
    for k, rec in enumerate(records):
        u, i, t = str(rec[0]), str(rec[1]), rec[2]
        users[k] = umap.setdefault(u, len(umap))
        items[k] = imap.setdefault(i, len(imap))
        ts[k] = int(t)
        if len(rec) > 3:
            labels[k] = int(rec[3])
    order = np.lexsort((np.arange(n), ts, users))
    return InteractionLog(users[order], items[order], ts[order], labels[order],
                          list(umap), list(imap))


def load_interactions(path, format: str = "csv") -> InteractionLog:
    """Parse a MovieLens ``::`` .dat file or a ``user,item,timestamp[,label]`` CSV.

    MovieLens ratings are all positives. A CSV header row is detected and
    skipped when its timestamp field is not an integer.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    records = []
    with path.open("r", encoding="latin-1", newline="") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if format == "movielens-dat":
                parts = line.split("::")
                if len(parts) != 4:
                    raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", line_no)
                u, i, _rating, t = parts
                rec = (u, i, t)
            else:
                parts = next(csv.reader([line]))
                if len(parts) not in (3, 4):
                    raise ParseError(f"expected 3 or 4 comma-separated fields, got {len(parts)}",
                                     line_no)
                rec = tuple(p.strip() for p in parts)
            try:
                t = int(rec[2])
                lab = int(rec[3]) if len(rec) > 3 else 1
            except ValueError:
                if line_no == 1 and format == "csv":
                    continue
                raise ParseError(f"non-integer timestamp/label in {line!r}", line_no) from None
            if lab not in (0, 1):
                raise ParseError(f"label must be 0 or 1, got {lab}", line_no)
            records.append((rec[0], rec[1], t, lab))
    if not records:
        raise DataError(f"no interactions in {path}")
    return from_records(records)


def write_interactions(log_: InteractionLog, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "timestamp", "label"])
        for u, i, t, y in zip(log_.users, log_.items, log_.timestamps, log_.labels):
            w.writerow([log_.user_ids[u], log_.item_ids[i], int(t), int(y)])


def subsample_users(log_: InteractionLog, max_users: int, seed: int) -> InteractionLog:
    present = np.unique(log_.users)
    if max_users is None or max_users >= len(present):
        return log_
    keep = np.random.default_rng(seed).choice(present, size=max_users, replace=False)
    return log_.subset(np.isin(log_.users, keep))


# ------------------------------------------------------------------- splitting

@dataclass
class Split:
    train: InteractionLog
    test: InteractionLog
    excluded_users: int = 0


def leave_last_out_split(log_: InteractionLog) -> Split:
    """Each user's final positive goes to test and everything before it to train.

    Users with < 2 interactions (or nothing before their final positive) are
    dropped. Explicit negatives logged after the final positive are discarded
    so that no training record is later than the user's test record.
    """
    test_mask = np.zeros(len(log_), bool)
    keep_mask = np.zeros(len(log_), bool)
    excluded = 0
    for u, sl in log_.user_slices().items():
        pos = np.flatnonzero(log_.labels[sl] == 1)
        if sl.stop - sl.start < 2 or len(pos) == 0 or pos[-1] == 0:
            excluded += 1
            continue
        keep_mask[sl.start:sl.start + pos[-1]] = True
        test_mask[sl.start + pos[-1]] = True
    if excluded:
        log.warning("leave-last-out: excluded %d users with fewer than 2 interactions", excluded)
    train = log_.subset(keep_mask)
    test = log_.subset(test_mask)
    return Split(train, test, excluded)


# ---------------------------------------------------------- sampled datasets

@dataclass
class SampleSet:
    """Flat training/test samples; ``sequences`` rows are left-padded with PAD."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    sequences: np.ndarray

    def __len__(self):
        return len(self.users)

    def take(self, idx, group=None) -> Batch:
        return Batch(self.users[idx], self.items[idx], self.sequences[idx], self.labels[idx],
                     group=group)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.users[idx], self.items[idx], self.labels[idx],
                         self.timestamps[idx], self.sequences[idx])

    def as_batch(self, group=None) -> Batch:
        return Batch(self.users, self.items, self.sequences, self.labels, group=group)


@dataclass
class SampledDataset:
    train: SampleSet
    test: SampleSet
    n_users: int
    n_items: int
    user_ids: List[str] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)
    # users whose candidate pool was too small and were sampled with replacement
    replacement_users: List[int] = field(default_factory=list)
    excluded_users: int = 0
    # positive click history per user (training positives, split order)
    history_len: Dict[int, int] = field(default_factory=dict)


def _pad(hist: Sequence[int], L: int) -> np.ndarray:
    row = np.full(L, PAD, np.int64)
    tail = list(hist)[-L:]
    if tail:
        row[L - len(tail):] = tail
    return row


def build_sequences(histories: Dict[int, Sequence[int]], users, positions, L: int) -> np.ndarray:
    """Rows of the up-to-L most recent clicks preceding each sample.

    ``histories[u]`` is the user's chronologically ordered positive items and
    ``positions[k]`` the number of those clicks strictly preceding sample k.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.full((len(users), L), PAD, np.int64)
    for k, (u, pos) in enumerate(zip(users, positions)):
        hist = histories.get(int(u), ())
        lo = max(0, int(pos) - L)
        chunk = hist[lo:int(pos)]
        if len(chunk):
            out[k, L - len(chunk):] = chunk
    return out


def _draw_without_replacement(rng, pool: np.ndarray, rows: int, k: int) -> np.ndarray:
    """``rows`` independent k-subsets of ``pool`` (k <= len(pool))."""
    m = len(pool)
    if k * 4 > m:
        return np.stack([rng.choice(pool, size=k, replace=False) for _ in range(rows)]) \
            if rows else np.empty((0, k), np.int64)
    idx = rng.integers(0, m, size=(rows, k))
    while True:
        srt = np.sort(idx, axis=1)
        bad = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1)) if k > 1 else []
        if len(bad) == 0:
            break
        idx[bad] = rng.integers(0, m, size=(len(bad), k))
    return pool[idx]


def negative_sample(split: Split, train_ratio: int = 4, test_mode: str = "ratio-1-to-99",
                    seed: int = 0, L: int = 50, test_negatives: int = 99) -> SampledDataset:
    """Sample negatives for both splits and attach click sequences.

    Candidate pool per user = items the user never interacted with in either
    split. Each sampled negative shares the timestamp and history of the
    positive it was drawn for. Per-user generators are derived from
    ``(seed, user)`` so the result does not depend on iteration order.
    """
    if train_ratio < 1 or test_negatives < 1:
        raise ValueError("sampling ratios must be >= 1")
    if test_mode not in TEST_MODES:
        raise ValueError(f"unknown test mode {test_mode!r}; expected one of {TEST_MODES}")
    train, test = split.train, split.test
    n_items = train.n_items
    all_items = np.arange(n_items)
    tr_sl = train.user_slices()
    te_sl = test.user_slices()

    cols = {name: [] for name in ("users", "items", "labels", "timestamps", "positions")}
    tcols = {name: [] for name in cols}
    histories: Dict[int, np.ndarray] = {}
    flagged = []

    def emit(target, u, items, labels, ts, pos):
        n = len(items)
        target["users"].append(np.full(n, u, np.int64))
        target["items"].append(np.asarray(items, np.int64))
        target["labels"].append(np.asarray(labels, np.int64))
        target["timestamps"].append(np.asarray(ts, np.int64))
        target["positions"].append(np.asarray(pos, np.int64))

    for u in sorted(tr_sl):
        rng = np.random.default_rng([seed, u])
        sl = tr_sl[u]
        items, labels, ts = train.items[sl], train.labels[sl], train.timestamps[sl]
        te_items = test.items[te_sl[u]] if u in te_sl else np.empty(0, np.int64)
        pool = np.setdiff1d(all_items, np.concatenate([items, te_items]), assume_unique=False)
        is_pos = labels == 1
        # clicks preceding each record (exclusive prefix count of positives)
        prefix = np.concatenate([[0], np.cumsum(is_pos)[:-1]])
        histories[u] = items[is_pos]
        emit(cols, u, items, labels, ts, prefix)
        pos_idx = np.flatnonzero(is_pos)
        if len(pool) == 0:
            flagged.append(u)
            continue
        if len(pool) < train_ratio:
            flagged.append(u)
            neg = rng.choice(pool, size=(len(pos_idx), train_ratio), replace=True)
        else:
            neg = _draw_without_replacement(rng, pool, len(pos_idx), train_ratio)
        emit(cols, u, neg.ravel(), np.zeros(neg.size), np.repeat(ts[pos_idx], train_ratio),
             np.repeat(prefix[pos_idx], train_ratio))

        if u in te_sl:
            tsl = te_sl[u]
            t_items, t_ts = test.items[tsl], test.timestamps[tsl]
            n_hist = int(is_pos.sum())
            if test_mode == "all-negatives":
                tneg = pool
            elif len(pool) < test_negatives:
                if u not in flagged:
                    flagged.append(u)
                tneg = rng.choice(pool, size=test_negatives, replace=True)
            else:
                tneg = rng.choice(pool, size=test_negatives, replace=False)
            for it, t in zip(t_items, t_ts):
                emit(tcols, u, np.concatenate([[it], tneg]),
                     np.concatenate([[1], np.zeros(len(tneg))]),
                     np.full(len(tneg) + 1, t), np.full(len(tneg) + 1, n_hist))

    def finish(c):
        if not c["users"]:
            empty = np.empty(0, np.int64)
            return SampleSet(empty, empty, empty.astype(float), empty, np.empty((0, L), np.int64))
        arrs = {k: np.concatenate(v) for k, v in c.items()}
        seqs = build_sequences(histories, arrs["users"], arrs["positions"], L)
        return SampleSet(arrs["users"], arrs["items"], arrs["labels"].astype(np.float64),
                         arrs["timestamps"], seqs)

    return SampledDataset(
        train=finish(cols), test=finish(tcols), n_users=train.n_users, n_items=n_items,
        user_ids=list(train.user_ids), item_ids=list(train.item_ids),
        replacement_users=flagged, excluded_users=split.excluded_users,
        history_len={u: len(h) for u, h in histories.items()},
    )


def write_samples(samples: SampleSet, path, user_ids=None, item_ids=None) -> None:
    """Canonical sampled-dataset CSV; ``sequence`` holds pipe-delimited item ids."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "timestamp", "label", "sequence"])
        for k in range(len(samples)):
            seq = samples.sequences[k]
            seq = seq[seq != PAD]
            w.writerow([int(samples.users[k]), int(samples.items[k]), int(samples.timestamps[k]),
                        int(samples.labels[k]), "|".join(str(int(s)) for s in seq)])


def read_samples(path, L: int) -> SampleSet:
    users, items, ts, labels, seqs = [], [], [], [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user", "item", "timestamp", "label", "sequence"]:
            raise ParseError(f"unexpected header {header!r}", 1)
        for line_no, row in enumerate(reader, start=2):
            try:
                u, i, t, y = (int(x) for x in row[:4])
                hist = [int(x) for x in row[4].split("|")] if row[4] else []
            except (ValueError, IndexError):
                raise ParseError(f"malformed sample row {row!r}", line_no) from None
            users.append(u)
            items.append(i)
            ts.append(t)
            labels.append(y)
            seqs.append(_pad(hist, L))
    seq_arr = np.stack(seqs) if seqs else np.empty((0, L), np.int64)
    return SampleSet(np.array(users, np.int64), np.array(items, np.int64),
                     np.array(labels, np.float64), np.array(ts, np.int64), seq_arr)


# ------------------------------------------------------------------ synthetic

@dataclass
class SynthSpec:
    """Long-tail generator settings; group 1 is the least active (tail)."""

    users_per_group: List[int] = field(default_factory=lambda: [400, 160, 80, 40, 20])
    activeness_ranges: List[Tuple[int, int]] = field(
        default_factory=lambda: [(4, 10), (10, 26), (26, 50), (50, 100), (100, 200)])
    n_items: int = 400
    shared_dim: int = 8
    group_dim: int = 4
    group_strength: float = 1.0
    noise: float = 0.3
    sharpness: float = 3.0
    click_offset: float = -4.0
    seed: int = 0

    def __post_init__(self):
        self.activeness_ranges = [tuple(int(x) for x in r) for r in self.activeness_ranges]
        self.users_per_group = [int(x) for x in self.users_per_group]

    def validate(self):
        if len(self.users_per_group) != len(self.activeness_ranges):
            raise ValueError("users_per_group and activeness_ranges must have equal length")
        if not self.users_per_group:
            raise ValueError("at least one group is required")
        for n_u, (lo, hi) in zip(self.users_per_group, self.activeness_ranges):
            if n_u < 1:
                raise ValueError("every group needs at least one user")
            if lo < 2 or hi < lo:
                raise ValueError(f"infeasible activeness range {(lo, hi)}: need 2 <= lo <= hi")
            if hi > self.n_items:
                raise ValueError(f"activeness {hi} exceeds item count {self.n_items}")
        if self.shared_dim < 1 or self.group_dim < 0:
            raise ValueError("shared_dim must be >= 1 and group_dim >= 0")


def generate_synthetic(spec: SynthSpec) -> InteractionLog:
    """Users draw an individual shared-space preference plus their group's
    preference vector; each user clicks ``T_u`` distinct items with
    probability proportional to sigmoid(sharpness * affinity + click_offset)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dim = spec.shared_dim + spec.group_dim
    item_vec = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(spec.n_items, dim))
    item_bias = rng.normal(0.0, 0.5, size=spec.n_items)
    group_vec = rng.normal(0.0, 1.0, size=(len(spec.users_per_group), spec.group_dim))
    group_vec *= spec.group_strength
    records = []
    uid = 0
    for j, (n_u, (lo, hi)) in enumerate(zip(spec.users_per_group, spec.activeness_ranges)):
        for _ in range(n_u):
            pref = np.concatenate([
                rng.normal(0.0, 1.0, spec.shared_dim),
                group_vec[j] + rng.normal(0.0, spec.noise, spec.group_dim),
            ])
            affinity = item_vec @ pref + item_bias
            w = sigmoid(spec.sharpness * affinity + spec.click_offset)
            T = int(rng.integers(lo, hi + 1))
            chosen = rng.choice(spec.n_items, size=T, replace=False, p=w / w.sum())
            t = np.cumsum(rng.integers(1, 100, size=T))
            for it, ts in zip(chosen, t):
                records.append((f"u{uid}", f"i{it}", int(ts), 1))
            uid += 1
    item_ids = [f"i{k}" for k in range(spec.n_items)]
    return from_records(records, item_ids=item_ids)


def synthetic_group_of(spec: SynthSpec) -> Dict[int, int]:
    """Generator-side group (1-based) of each dense user id."""
    out, uid = {}, 0
    for j, n_u in enumerate(spec.users_per_group, start=1):
        for _ in range(n_u):
            out[uid] = j
            uid += 1
    return out
