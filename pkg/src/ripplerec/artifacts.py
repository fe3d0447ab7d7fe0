"""Everything needed to score users against items, bundled."""
from __future__ import annotations

from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .coldstart import EmbeddingResolver, EncoderParams, Resolution, SimilarityIndex
from .dataset import DatasetBundle
from .kg import KnowledgeGraph, ProfileStore
from .model import ColdStartUnresolved, ModelConfig, ModelParameters, score_batch

SCORE_CHUNK = 2048


@dataclass(eq=False)
class ModelArtifacts:
    config: ModelConfig
    params: ModelParameters
    kg: KnowledgeGraph
    profiles: ProfileStore
    popularity: dict[str, int] = field(default_factory=dict)
    index: SimilarityIndex | None = None
    encoder: EncoderParams | None = None
    strategy: str = "similarity"
    train_date: str | None = None
    manifest: dict | None = None

    def resolver(self, content=None, strategy: str | None = None) -> EmbeddingResolver:
        return EmbeddingResolver(self.params, self.kg, strategy or self.strategy, self.index,
                                 self.encoder, content)

    def popularity_of(self, item_id: str) -> int:
        return self.popularity.get(item_id, 0)


def popularity_counts(bundle: DatasetBundle, rows=None) -> dict[str, int]:
    """Click counts per item over ``rows`` (default: all interactions)."""
    if rows is None:
        rows = range(len(bundle.interactions))
    counts = Counter(bundle.interactions[i]["item_id"] for i in rows if bundle.clicks[i] == 1)
    return dict(sorted(counts.items()))


def score_pairs(params: ModelParameters, profiles: ProfileStore, user_rows: np.ndarray,
                vectors: np.ndarray, chunk: int = SCORE_CHUNK) -> np.ndarray:
    """Model scores for aligned (profile-store row, candidate vector) pairs, in chunks."""
    user_rows = np.asarray(user_rows, dtype=np.int64)
    out = np.empty(len(user_rows))
    mask = profiles.hop_mask
    for s in range(0, len(user_rows), chunk):
        r = user_rows[s:s + chunk]
        out[s:s + chunk] = score_batch(params, profiles.heads[r], profiles.relations[r],
                                       profiles.tails[r], mask[r], vectors[s:s + chunk])
    return out


@dataclass
class ScoredSlate:
    """Candidates of one user after resolution, with scores and provenance."""

    user_id: str
    item_ids: list[str]
    scores: np.ndarray
    provenance: list[str]
    fallback: bool
    unresolved: list[str] = field(default_factory=list)


def score_slates(artifacts: ModelArtifacts, resolver: EmbeddingResolver,
                 slates: Mapping[str, list[str]]) -> dict[str, ScoredSlate]:
    """Score each user's candidate list.

    Users with a non-empty profile are scored by the model; the rest get the
    item's training click count as score (popularity fallback). Items that
    cannot be resolved are dropped and listed in ``unresolved``.
    """
    out: dict[str, ScoredSlate] = {}
    pend_rows, pend_vecs, pend_slots = [], [], []
    for user in sorted(slates):
        items = list(dict.fromkeys(slates[user]))
        if artifacts.profiles.has_profile(user):
            kept, prov, unresolved = [], [], []
            for item in items:
                try:
                    res: Resolution = resolver.resolve(item)
                except ColdStartUnresolved:
                    unresolved.append(item)
                    continue
                kept.append(item)
                prov.append(res.provenance)
                pend_rows.append(artifacts.profiles.index[user])
                pend_vecs.append(res.vector)
                pend_slots.append((user, len(kept) - 1))
            out[user] = ScoredSlate(user, kept, np.zeros(len(kept)), prov, False, unresolved)
        else:
            scores = np.array([artifacts.popularity_of(i) for i in items], dtype=np.float64)
            out[user] = ScoredSlate(user, items, scores, ["fallback"] * len(items), True)
    if pend_rows:
        vecs = np.array(pend_vecs, dtype=np.float64)
        scores = score_pairs(artifacts.params, artifacts.profiles, np.array(pend_rows), vecs)
        for (user, pos), s in zip(pend_slots, scores):
            out[user].scores[pos] = s
    return out
