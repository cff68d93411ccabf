"""AUC, HitRate@K and NDCG@K at group and user level."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

TIE_POLICIES = ("strict", "half")


def auc(pos_scores, neg_scores, tie_policy: str = "strict") -> float:
    """Fraction of (positive, negative) pairs ranked correctly.

    ``strict`` counts only neg < pos; ``half`` also credits ties with 0.5.
    Pair counts are exact integers, so no precision is lost at any size.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    below = np.searchsorted(neg, pos, side="left")
    strict = int(below.sum())
    if tie_policy == "strict":
        return strict / (pos.size * neg.size)
    ties = int((np.searchsorted(neg, pos, side="right") - below).sum())
    return (strict + 0.5 * ties) / (pos.size * neg.size)


def hitrate_at_k(ranks: Mapping, K: int) -> float:
    r = _rank_array(ranks, K)
    return float(np.mean(r <= K))


def ndcg_at_k(ranks: Mapping, K: int) -> float:
    """Binary relevance with a single ground-truth item, so the ideal DCG is 1."""
    r = _rank_array(ranks, K)
    gain = np.where(r <= K, 1.0 / np.log2(r + 1.0), 0.0)
    return float(np.mean(gain))


def _rank_array(ranks, K):
    if K < 1:
        raise ValueError("K must be >= 1")
    vals = ranks.values() if isinstance(ranks, Mapping) else ranks
    r = np.asarray(list(vals), dtype=np.float64)
    if r.size == 0:
        raise ValueError("no users to evaluate")
    if np.any(r < 1):
        raise ValueError("ranks start at 1")
    return r


def rank_of_positive(scores, labels) -> int:
    """1-based rank of the (first) positive; tied negatives rank ahead of it."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    if pos.size == 0:
        raise ValueError("no positive candidate")
    return 1 + int(np.sum(scores[labels == 0] >= pos[0]))


# ------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    groups: List[dict]
    user_level: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"groups": self.groups, "user_level": self.user_level, "metadata": self.metadata}


def _per_user(users, scores, labels):
    order = np.argsort(users, kind="stable")
    u_sorted = users[order]
    bounds = np.flatnonzero(np.diff(u_sorted)) + 1
    for chunk in np.split(order, bounds):
        if chunk.size:
            yield int(users[chunk[0]]), scores[chunk], labels[chunk]


def user_metrics(users, scores, labels, k_values=(5, 10), tie_policy="strict") -> Dict[int, dict]:
    """Per-user AUC (None when a class is missing) and ground-truth rank."""
    out = {}
    for u, s, y in _per_user(np.asarray(users), np.asarray(scores, float), np.asarray(labels)):
        has_pos, has_neg = bool(np.any(y == 1)), bool(np.any(y == 0))
        row = {"auc": auc(s[y == 1], s[y == 0], tie_policy) if has_pos and has_neg else None,
               "rank": rank_of_positive(s, y) if has_pos else None}
        out[u] = row
    return out


def _summary(per_user: Mapping[int, dict], k_values) -> dict:
    aucs = [r["auc"] for r in per_user.values() if r["auc"] is not None]
    ranks = [r["rank"] for r in per_user.values() if r["rank"] is not None]
    row = {"n_users": len(per_user), "n_auc_users": len(aucs),
           "auc": float(np.mean(aucs)) if aucs else None}
    for K in k_values:
        row[f"hr@{K}"] = hitrate_at_k(ranks, K) if ranks else None
        row[f"ndcg@{K}"] = ndcg_at_k(ranks, K) if ranks else None
    return row


def build_report(predictions, labels, users, assignment, level: str = "both",
                 k_values: Sequence[int] = (5, 10), tie_policy: str = "strict",
                 metadata: Optional[dict] = None) -> MetricsReport:
    """Group table (pooled AUC headline plus within-group user averages) and
    user-level averages over every user with both classes."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    users = np.asarray(users)
    if not (len(predictions) == len(labels) == len(users)):
        raise ValueError("predictions, labels and users must be aligned")
    per_user = user_metrics(users, predictions, labels, k_values, tie_policy)
    groups = []
    if level in ("group", "both"):
        gid = np.array([assignment.group_of.get(int(u), 0) for u in users])
        for j in range(1, assignment.n + 1):
            sel = gid == j
            y, s = labels[sel], predictions[sel]
            members = {u: r for u, r in per_user.items() if assignment.group_of.get(u) == j}
            row = {"group": j, "n_samples": int(sel.sum())}
            row["auc_pooled"] = (auc(s[y == 1], s[y == 0], tie_policy)
                                 if np.any(y == 1) and np.any(y == 0) else None)
            summ = _summary(members, k_values) if members else {"n_users": 0, "auc": None}
            row["auc_user_mean"] = summ.pop("auc")
            row.update(summ)
            groups.append(row)
    user_level = {}
    if level in ("user", "both"):
        user_level = _summary(per_user, k_values)
        if user_level["auc"] is None:
            raise ValueError("no user has both positive and negative samples")
    return MetricsReport(groups, user_level, dict(metadata or {}))
