"""Serving-side ranking from a loaded archive."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .archive import load_archive
from .artifacts import ModelArtifacts, score_slates
from .metrics import rank_order
from .pipeline import CURRENT


@dataclass(frozen=True)
class Recommendation:
    rank: int
    item_id: str
    score: float
    provenance: str


def open_archive(path) -> ModelArtifacts:
    """Load an archive directory, or the current archive of a serving directory."""
    path = Path(path)
    if (path / CURRENT).exists():
        path = path / CURRENT
    return load_archive(path)


def recommend(artifacts: ModelArtifacts, user_id: str, candidates=None, n: int | None = None,
              strategy: str | None = None, content=None) -> list[Recommendation]:
    """Rank candidates for one user.

    Without explicit candidates every indexed known item is ranked. Users
    without a ripple profile get the popularity ranking, tagged ``fallback``.
    Candidates that cannot be resolved under ``strategy`` are left out.
    """
    if candidates is None:
        candidates = list(artifacts.index.item_ids) if artifacts.index is not None else artifacts.kg.item_ids()
    candidates = list(dict.fromkeys(candidates))
    if not candidates:
        raise ValueError("empty candidate set")
    scored = score_slates(artifacts, artifacts.resolver(content, strategy), {user_id: candidates})[user_id]
    order = rank_order(scored.item_ids, scored.scores)
    if n is not None:
        order = order[:n]
    return [Recommendation(r + 1, scored.item_ids[i], float(scored.scores[i]), scored.provenance[i])
            for r, i in enumerate(order)]


def format_recommendations(recs: list[Recommendation]) -> str:
    lines = ["rank\titem_id\tscore\tprovenance"]
    lines += [f"{r.rank}\t{r.item_id}\t{r.score!r}\t{r.provenance}" for r in recs]
    return "\n".join(lines) + "\n"
