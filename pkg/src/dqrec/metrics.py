"""Recall@K / NDCG@K with in-batch negatives."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionLog


def recall_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


def pessimistic_rank(pos_score: float, neg_scores) -> int:
    """1 + number of negatives scoring at least as high as the positive."""
    return 1 + int(np.count_nonzero(np.asarray(neg_scores) >= pos_score))


@dataclass
class MetricsReport:
    ks: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    samples: int
    skipped: int = 0
    fingerprint: str = ""
    seconds: float = 0.0
    ranks: np.ndarray = field(default=None, repr=False)

    def row(self) -> dict[str, float]:
        out = {}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
        for k in self.ks:
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out | {"samples": self.samples, "skipped": self.skipped}


def user_positives(*logs: InteractionLog) -> list[set[int]]:
    n = logs[0].user_count
    known: list[set[int]] = [set() for _ in range(n)]
    for lg in logs:
        for u, i in zip(lg.users, lg.items):
            known[u].add(int(i))
    return known


def report_from_ranks(ranks, ks, skipped: int = 0, fingerprint: str = "", seconds: float = 0.0) -> MetricsReport:
    ks = sorted(ks)
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks):
        recall = {k: float(np.mean(ranks <= k)) for k in ks}
        ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0))) for k in ks}
    else:
        recall = {k: 0.0 for k in ks}
        ndcg = {k: 0.0 for k in ks}
    return MetricsReport(ks, recall, ndcg, len(ranks), skipped, fingerprint, seconds, ranks)


def evaluate(scorer, test: InteractionLog, known: list[set[int]], batch_size: int = 1024,
             ks=(5, 10, 20), fingerprint: str = "") -> MetricsReport:
    """Rank each test positive against the other items of its batch.

    ``scorer(users, items)`` returns a ``(len(users), len(items))`` score
    matrix. Candidates exclude every item in ``known[user]`` except the
    positive itself. Samples left without negatives are skipped.
    """
    t0 = time.perf_counter()
    ranks, skipped = [], 0
    for start in range(0, len(test), batch_size):
        users = test.users[start:start + batch_size]
        pos = test.items[start:start + batch_size]
        items = np.unique(pos)
        col = {int(i): c for c, i in enumerate(items)}
        uniq_users, inv = np.unique(users, return_inverse=True)
        scores = np.asarray(scorer(uniq_users, items))
        for row, (u, i) in enumerate(zip(users, pos)):
            s = scores[inv[row]]
            seen = known[u]
            negs = [c for c, j in enumerate(items) if j != i and int(j) not in seen]
            if not negs:
                skipped += 1
                continue
            ranks.append(pessimistic_rank(s[col[int(i)]], s[negs]))
    return report_from_ranks(ranks, ks, skipped, fingerprint, time.perf_counter() - t0)


def popularity_scorer(train: InteractionLog):
    counts = np.bincount(train.items, minlength=train.item_count).astype(np.float64)

    def scorer(users, items):
        return np.broadcast_to(counts[items], (len(users), len(items)))

    return scorer
