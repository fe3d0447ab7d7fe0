"""End-to-end fitting: graph extraction, ripple sets, training, similarity index."""
from __future__ import annotations

import datetime as dt

import numpy as np

from .artifacts import ModelArtifacts, popularity_counts
from .coldstart import BridgeError, ContentProvider, build_similarity_index, item_contents
from .dataset import DEFAULT_TIMEZONE, DatasetBundle
from .evaluation import make_ndcg_evaluator
from .kg import ExtractionConfig, KnowledgeGraph, ProfileStore, build_all_profiles, click_histories, extract_knowledge_graph
from .model import ModelConfig, TrainResult, make_examples, train


def rows_on_days(bundle: DatasetBundle, first: dt.date, last: dt.date,
                 timezone: str = DEFAULT_TIMEZONE) -> np.ndarray:
    days = bundle.local_days(timezone)
    return np.flatnonzero([(first <= d <= last) for d in days])


def recent_items(bundle: DatasetBundle, rows: np.ndarray, last_day: dt.date, window_days: int,
                 timezone: str = DEFAULT_TIMEZONE) -> set[str]:
    """Items with an impression among ``rows`` in the ``window_days`` days ending at ``last_day``."""
    days = bundle.local_days(timezone)
    first = last_day - dt.timedelta(days=window_days - 1)
    return {bundle.interactions[i]["item_id"] for i in rows if first <= days[i] <= last_day}


def extract_for_rows(bundle: DatasetBundle, rows: np.ndarray,
                     extraction: ExtractionConfig | None = None) -> KnowledgeGraph:
    """Graph over the items seen in ``rows`` only, so later items stay unseen."""
    items = {bundle.interactions[i]["item_id"] for i in rows}
    return extract_knowledge_graph(bundle.items, extraction, items)


def profiles_for_rows(bundle: DatasetBundle, rows: np.ndarray, kg: KnowledgeGraph, config: ModelConfig,
                      max_history: int | None = None, n_workers: int = 1) -> ProfileStore:
    histories = click_histories(bundle, rows, max_history)
    return build_all_profiles(histories, kg, config.n_hop, config.n_memory, config.seed, n_workers)


def fit(bundle: DatasetBundle, train_rows: np.ndarray, valid_rows: np.ndarray | None = None,
        config: ModelConfig | None = None, extraction: ExtractionConfig | None = None,
        strategy: str = "similarity", provider: ContentProvider | None = None,
        max_history: int | None = None, n_workers: int = 1,
        train_date: str | None = None, index_window_days: int | None = None,
        ) -> tuple[ModelArtifacts, TrainResult]:
    """Extract, profile and train on ``train_rows``; early-stop on ``valid_rows`` when given.

    ``index_window_days`` limits the similarity index to items seen in the last
    days of the training rows; by default every known item is matchable.
    """
    config = config or ModelConfig()
    train_rows = np.asarray(train_rows, dtype=np.int64)
    kg = extract_for_rows(bundle, train_rows, extraction)
    profiles = profiles_for_rows(bundle, train_rows, kg, config, max_history, n_workers)
    content = item_contents(bundle.items, provider)
    known = None
    if index_window_days is not None and len(train_rows):
        last = max(bundle.local_days()[train_rows])
        known = recent_items(bundle, train_rows, last, index_window_days)
    try:
        index = build_similarity_index(kg, content, known)
    except BridgeError:
        index = None
    popularity = popularity_counts(bundle, train_rows)
    pairs = [(bundle.interactions[i]["user_id"], bundle.interactions[i]["item_id"], int(bundle.clicks[i]))
             for i in train_rows]
    examples = make_examples(pairs, kg, profiles)
    evaluator = None
    if valid_rows is not None and len(valid_rows):
        rows = [bundle.interactions[i] for i in valid_rows]
        eval_strategy = strategy if index is not None else "known_only"
        evaluator = make_ndcg_evaluator(kg, profiles, rows, config, popularity, index, content, eval_strategy)
    result = train(kg, profiles, examples, config, evaluator)
    artifacts = ModelArtifacts(config, result.params, kg, profiles, popularity, index, None,
                               strategy, train_date)
    return artifacts, result
