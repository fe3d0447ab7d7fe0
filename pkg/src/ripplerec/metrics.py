"""Binary-relevance ranking metrics at a cutoff k."""
from __future__ import annotations

import numpy as np


def rank_order(item_ids, scores) -> list[int]:
    """Positions sorted by descending score, ties by ascending item id."""
    return sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))


def _check(total_positives: int, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if total_positives < 1:
        raise ValueError("metric undefined without positives")


def dcg_at_k(labels, k: int) -> float:
    r = np.asarray(labels, dtype=np.float64)[:k]
    return float(np.sum(r / np.log2(np.arange(2, r.size + 2))))


def ndcg_at_k(labels, total_positives: int, k: int) -> float:
    """NDCG@k of a ranked label list; the ideal ranking puts all ``total_positives`` first."""
    _check(total_positives, k)
    n_ideal = min(k, total_positives)
    idcg = float(np.sum(1.0 / np.log2(np.arange(2, n_ideal + 2))))
    return dcg_at_k(labels, k) / idcg


def precision_recall_at_k(labels, total_positives: int, k: int) -> tuple[float, float]:
    """Hits in the top k over k (even for shorter lists) and over ``total_positives``."""
    _check(total_positives, k)
    hits = float(np.sum(np.asarray(labels, dtype=np.float64)[:k]))
    return hits / k, hits / total_positives
