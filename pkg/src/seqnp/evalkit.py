"""Ranking metrics, evaluation protocol, and reference rankers.

Held-out users are scored on their final items: the last ``basket`` items
(clipped to what the sequence can spare beyond one query window) are the
truth set, everything before them is observable history. The query is the
most recent full window of that history; context is either the query
window alone or the most recent windows up to a cap. Users whose history
cannot yield both a query window and a non-empty truth set are skipped
and counted.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .corpus import PAD_INDEX
from .decoder import top_k

__all__ = [
    "hit_at_k", "recall_at_k", "ndcg_at_k", "EvalCase", "EvalReport",
    "build_cases", "prefix_windows", "evaluate", "evaluate_sequences",
    "popularity_counts", "ModelRanker", "PopularityRanker", "RandomRanker",
]


# metrics ------------------------------------------------------------------


def hit_at_k(ranked, truth, k: int) -> float:
    """1.0 when any of the first k ranked items is in the truth set."""
    truth = set(truth)
    return 1.0 if any(item in truth for item in list(ranked)[:k]) else 0.0


def recall_at_k(ranked, truth, k: int) -> float:
    truth = set(truth)
    if not truth:
        raise ValueError("recall needs a non-empty truth set")
    hits = sum(1 for item in list(ranked)[:k] if item in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k: int) -> float:
    """Binary-gain NDCG: discounts 1/log2(rank+1), ideal mass over
    min(k, |truth|) leading positions."""
    truth = set(truth)
    if not truth:
        raise ValueError("ndcg needs a non-empty truth set")
    dcg = 0.0
    for pos, item in enumerate(list(ranked)[:k], start=1):
        if item in truth:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(pos + 1)
                for pos in range(1, min(k, len(truth)) + 1))
    return dcg / ideal


# protocol -----------------------------------------------------------------


@dataclasses.dataclass
class EvalCase:
    user_index: int
    context_windows: np.ndarray    # [n_ctx, window]
    query_window: np.ndarray       # [window]
    truth: tuple
    exclude: tuple


def prefix_windows(items, length: int) -> np.ndarray:
    """All full sliding windows over an item prefix; a short prefix yields
    one left-padded window."""
    arr = np.asarray(items, dtype=np.int64)
    if arr.size < length:
        pad = np.full(length - arr.size, PAD_INDEX, dtype=np.int64)
        return np.concatenate([pad, arr]).reshape(1, length)
    n = arr.size - length + 1
    return np.stack([arr[i:i + length] for i in range(n)])


def build_cases(sequences, window: int, basket: int, mode: str,
                context_size: int, exclude_seen: bool) -> tuple[list, int]:
    cases = []
    skipped = 0
    for seq in sequences:
        n = len(seq.items)
        held = min(basket, n - window)
        if held < 1:
            skipped += 1
            continue
        truth = tuple(int(i) for i in seq.items[n - held:])
        prefix = seq.items[:n - held]
        windows = prefix_windows(prefix, window)
        query = windows[-1]
        if mode == "single-window":
            context = windows[-1:]
        else:
            take = min(context_size, windows.shape[0])
            context = windows[-take:]
        exclude = tuple(int(i) for i in query if i != PAD_INDEX) \
            if exclude_seen else ()
        cases.append(EvalCase(seq.user_index, context, query, truth, exclude))
    return cases, skipped


# rankers ------------------------------------------------------------------


class ModelRanker:
    """Ranks with a trained model; users outside the training split get
    the configured stand-in embedding."""

    def __init__(self, model, trained_users=(), policy: str = "zero"):
        self.model = model
        self.trained = set(int(u) for u in trained_users)
        table = model.tables.user_table.data
        if policy == "mean" and self.trained:
            rows = table[sorted(self.trained)]
            self.fallback = rows.mean(axis=0)
        else:
            self.fallback = np.zeros(table.shape[1])

    def user_vector(self, user_index: int) -> np.ndarray:
        if user_index in self.trained:
            return self.model.tables.user_table.data[user_index]
        return self.fallback

    def rank(self, case: EvalCase, k: int) -> list:
        score = self.model.score_query(case.context_windows, case.query_window,
                                       self.user_vector(case.user_index))
        return top_k(score.y, k, exclude=case.exclude)


class RandomRanker:
    def __init__(self, item_count: int, rng: np.random.Generator):
        self.item_count = int(item_count)
        self.rng = rng

    def rank(self, case: EvalCase, k: int) -> list:
        order = self.rng.permutation(self.item_count) + 1
        keep = [int(i) for i in order if i not in set(case.exclude)]
        return keep[:k]


def popularity_counts(sequences, item_count: int) -> np.ndarray:
    """Interaction counts per dense item index (slot 0 stays unused)."""
    counts = np.zeros(item_count + 1)
    for seq in sequences:
        for item in seq.items:
            counts[int(item)] += 1.0
    counts[PAD_INDEX] = 0.0
    return counts


class PopularityRanker:
    """Static most-frequent ordering from training interactions; count
    ties fall back to ascending item index."""

    def __init__(self, counts: np.ndarray):
        items = np.arange(1, counts.shape[0])
        order = np.lexsort((items, -counts[1:]))
        self.ranking = [int(i) for i in items[order]]

    def rank(self, case: EvalCase, k: int) -> list:
        excluded = set(case.exclude)
        return [i for i in self.ranking if i not in excluded][:k]


# evaluation ---------------------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    metrics: dict                  # {cutoff: {"hit":…, "recall":…, "ndcg":…}}
    users: int
    skipped: int
    basket: int = 1
    config: dict | None = None

    def to_json_line(self) -> str:
        payload = {"users": self.users, "skipped": self.skipped,
                   "basket": self.basket,
                   "metrics": {str(k): v for k, v in self.metrics.items()}}
        if self.config is not None:
            payload["config"] = self.config
        return json.dumps(payload, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'cutoff':>8} {'hit':>10} {'recall':>10} {'ndcg':>10}"]
        for k in sorted(self.metrics):
            row = self.metrics[k]
            lines.append(f"{k:>8} {row['hit']:>10.4f} "
                         f"{row['recall']:>10.4f} {row['ndcg']:>10.4f}")
        lines.append(f"users evaluated: {self.users}  skipped: {self.skipped}")
        return "\n".join(lines)


def evaluate(ranker, cases, skipped: int, cutoffs=(1, 5, 10),
             basket: int = 1) -> EvalReport:
    cutoffs = tuple(int(k) for k in cutoffs)
    if not cases:
        return EvalReport({k: {"hit": 0.0, "recall": 0.0, "ndcg": 0.0}
                           for k in cutoffs}, 0, skipped, basket)
    k_max = max(cutoffs)
    totals = {k: np.zeros(3) for k in cutoffs}
    for case in cases:
        ranked = ranker.rank(case, k_max)
        for k in cutoffs:
            totals[k] += (hit_at_k(ranked, case.truth, k),
                          recall_at_k(ranked, case.truth, k),
                          ndcg_at_k(ranked, case.truth, k))
    metrics = {}
    for k in cutoffs:
        hit, recall, ndcg = totals[k] / len(cases)
        metrics[k] = {"hit": float(hit), "recall": float(recall),
                      "ndcg": float(ndcg)}
    return EvalReport(metrics, len(cases), skipped, basket)


def evaluate_sequences(ranker, sequences, window: int, basket: int,
                       cutoffs, mode: str, context_size: int,
                       exclude_seen: bool) -> EvalReport:
    cases, skipped = build_cases(sequences, window, basket, mode,
                                 context_size, exclude_seen)
    return evaluate(ranker, cases, skipped, cutoffs, basket)
