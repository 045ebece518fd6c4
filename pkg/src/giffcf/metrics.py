"""Normalized Recall@K, NDCG@K and MRR@K with binary relevance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from giffcf.inference import rank_block

METRICS = ("recall", "ndcg", "mrr")


def _hits(ranked, truth, k):
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth; exclude this user")
    return np.array([item in truth for item in list(ranked)[:k]], dtype=bool), len(truth)


def recall_at_k(ranked, truth, k: int) -> float:
    """Hits in the top ``k`` over ``min(k, |truth|)``."""
    hits, n = _hits(ranked, truth, k)
    return float(hits.sum() / min(k, n))


def ndcg_at_k(ranked, truth, k: int) -> float:
    hits, n = _hits(ranked, truth, k)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    return float((hits * disc[:len(hits)]).sum() / disc[:min(k, n)].sum())


def mrr_at_k(ranked, truth, k: int) -> float:
    hits, _ = _hits(ranked, truth, k)
    first = np.flatnonzero(hits)
    return float(1.0 / (first[0] + 1)) if len(first) else 0.0


def metrics_from_hits(hits: np.ndarray, n_truth: np.ndarray, k: int) -> dict:
    """Vectorized metrics from a ``(users, >=k)`` boolean hit matrix."""
    hits = hits[:, :k]
    if hits.shape[1] < k:  # catalog smaller than the cutoff
        hits = np.pad(hits, ((0, 0), (0, k - hits.shape[1])))
    n_truth = np.asarray(n_truth)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    idcg = np.cumsum(disc)[np.minimum(n_truth, k) - 1]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, np.inf)
    return {
        "recall": hits.sum(axis=1) / np.minimum(n_truth, k),
        "ndcg": (hits * disc).sum(axis=1) / idcg,
        "mrr": 1.0 / first,
    }


@dataclass
class EvalReport:
    split: str
    cutoffs: tuple
    means: dict  # (metric, k) -> float
    n_users: int
    per_user: dict | None = field(default=None, repr=False)
    users: np.ndarray | None = field(default=None, repr=False)

    def __getitem__(self, key):
        metric, k = key
        return self.means[(metric, int(k))]

    def rows(self):
        for k in self.cutoffs:
            for metric in METRICS:
                yield self.split, k, metric, self.means[(metric, k)], self.n_users

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["split", "cutoff", "metric", "value", "n_users"])
            for split, k, metric, value, n in self.rows():
                w.writerow([split, k, metric, f"{value:.10f}", n])

    def summary(self) -> str:
        return "  ".join(f"{m}@{k}={self.means[(m, k)]:.4f}" for k in self.cutoffs for m in METRICS)


# users -> (batch, n_items) scores
Scorer = Callable[[np.ndarray], np.ndarray]


def evaluate(scorer: Scorer, data, split: str = "test", cutoffs=(10, 20), batch_size: int = 512,
             mask_val: bool = False, keep_per_user: bool = False) -> EvalReport:
    """Rank all items for every user with held-out items in ``split``.

    Train items are always masked; validation items are additionally masked
    when ``mask_val`` is set (only meaningful for ``split="test"``).
    """
    truth = data.split(split)
    n_truth = np.diff(truth.indptr)
    users = np.flatnonzero(n_truth > 0)
    kmax = max(cutoffs)
    exclude = data.train + data.val if (mask_val and split == "test") else data.train
    per = {(m, k): [] for m in METRICS for k in cutoffs}
    for start in range(0, len(users), batch_size):
        block = users[start:start + batch_size]
        top = rank_block(scorer(block), kmax, exclude=exclude[block])
        t = truth[block]
        hits = np.zeros(top.shape, dtype=bool)
        for r in range(len(block)):
            hits[r] = np.isin(top[r], t.indices[t.indptr[r]:t.indptr[r + 1]])
        for k in cutoffs:
            for m, v in metrics_from_hits(hits, n_truth[block], k).items():
                per[(m, k)].append(v)
    per = {key: np.concatenate(v) if v else np.zeros(0) for key, v in per.items()}
    means = {key: float(v.mean()) if len(v) else 0.0 for key, v in per.items()}
    return EvalReport(split, tuple(int(k) for k in cutoffs), means, len(users),
                      per if keep_per_user else None, users if keep_per_user else None)
