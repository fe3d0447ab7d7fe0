"""Knowledge-graph extraction from item metadata and per-user ripple sets."""
from __future__ import annotations

import hashlib
import os
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CATEGORIES, DatasetBundle

FORWARD_RELATIONS = ("mentions_entity", "has_topic", "authored_by", "has_category")
INVERSE_SUFFIX = "_inv"
RELATIONS = FORWARD_RELATIONS + tuple(r + INVERSE_SUFFIX for r in FORWARD_RELATIONS)

ITEM_PREFIX = "item:"


def item_entity_name(item_id: str) -> str:
    return ITEM_PREFIX + item_id


@dataclass
class ExtractionConfig:
    entity_threshold: float = 0.0
    topic_threshold: float = 0.0
    category_threshold: float = 0.5
    use_entities: bool = True
    use_topics: bool = True
    use_authors: bool = True
    use_categories: bool = True


@dataclass(frozen=True)
class ExtractionReport:
    n_items: int
    isolated_items: int
    n_forward_triples: int


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Triples ``(head, relation, tail)`` as an ``(n, 3)`` int array sorted row-wise,
    with a CSR index over heads."""

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: np.ndarray
    report: ExtractionReport | None = None
    entity_index: dict[str, int] = field(init=False, repr=False)
    relation_index: dict[str, int] = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))
        triples = triples[order]
        object.__setattr__(self, "triples", triples)
        object.__setattr__(self, "entity_index", {e: i for i, e in enumerate(self.entities)})
        object.__setattr__(self, "relation_index", {r: i for i, r in enumerate(self.relations)})
        counts = np.bincount(triples[:, 0], minlength=len(self.entities))
        offsets = np.zeros(len(self.entities) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        object.__setattr__(self, "offsets", offsets)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def item_entity(self, item_id: str) -> int | None:
        return self.entity_index.get(item_entity_name(item_id))

    def item_ids(self) -> list[str]:
        """Item ids present as entities, sorted."""
        n = len(ITEM_PREFIX)
        return sorted(e[n:] for e in self.entities if e.startswith(ITEM_PREFIX))

    def triples_from(self, heads: np.ndarray) -> np.ndarray:
        """All triples whose head is in ``heads``, ordered by head then (relation, tail)."""
        heads = np.unique(np.asarray(heads, dtype=np.int64))
        if heads.size == 0:
            return np.empty((0, 3), dtype=np.int64)
        parts = [self.triples[self.offsets[h]:self.offsets[h + 1]] for h in heads]
        return np.concatenate(parts)

    def inverse_of(self, relation: int) -> int:
        name = self.relations[relation]
        if name.endswith(INVERSE_SUFFIX):
            return self.relation_index[name[: -len(INVERSE_SUFFIX)]]
        return self.relation_index[name + INVERSE_SUFFIX]

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entities == other.entities and self.relations == other.relations
                and np.array_equal(self.triples, other.triples))


def _item_facts(rec: dict, cfg: ExtractionConfig) -> list[tuple[str, str]]:
    facts = []
    if cfg.use_entities:
        ids = rec.get("wikidata_entities_ids") or []
        scores = rec.get("wikidata_entities_scores") or [1.0] * len(ids)
        facts += [("mentions_entity", "wd:" + q) for q, s in zip(ids, scores)
                  if s >= cfg.entity_threshold]
    if cfg.use_topics:
        topics = rec.get("wikidata_topics") or []
        scores = rec.get("wikidata_topics_scores") or [1.0] * len(topics)
        facts += [("has_topic", "topic:" + t) for t, s in zip(topics, scores)
                  if s >= cfg.topic_threshold]
    if cfg.use_authors and rec.get("author"):
        facts.append(("authored_by", "author:" + rec["author"]))
    if cfg.use_categories and rec.get("bert_category_scores"):
        scores = np.asarray(rec["bert_category_scores"], dtype=float)
        best = int(np.argmax(scores))
        if scores[best] >= cfg.category_threshold:
            name = CATEGORIES[best] if len(scores) == len(CATEGORIES) else str(best)
            facts.append(("has_category", "cat:" + name))
    return facts


def extract_knowledge_graph(items: Mapping[str, dict] | Iterable[dict],
                            config: ExtractionConfig | None = None,
                            item_ids: Iterable[str] | None = None) -> KnowledgeGraph:
    """Map item metadata to triples and add the inverse of each one.

    ``item_ids`` restricts the graph to those items; ids lacking a metadata
    record still become (isolated) entities.
    """
    cfg = config or ExtractionConfig()
    if not isinstance(items, Mapping):
        items = {rec["item_id"]: rec for rec in items}
    ids = sorted(set(item_ids) if item_ids is not None else items)

    forward: set[tuple[str, str, str]] = set()
    names = set()
    isolated = 0
    for item_id in ids:
        head = item_entity_name(item_id)
        names.add(head)
        facts = _item_facts(items[item_id], cfg) if item_id in items else []
        if not facts:
            isolated += 1
        for rel, tail in facts:
            names.add(tail)
            forward.add((head, rel, tail))

    entities = tuple(sorted(names))
    e_idx = {e: i for i, e in enumerate(entities)}
    r_idx = {r: i for i, r in enumerate(RELATIONS)}
    rows = []
    for h, r, t in forward:
        rows.append((e_idx[h], r_idx[r], e_idx[t]))
        rows.append((e_idx[t], r_idx[r + INVERSE_SUFFIX], e_idx[h]))
    report = ExtractionReport(len(ids), isolated, len(forward))
    return KnowledgeGraph(entities, RELATIONS, np.array(rows, dtype=np.int64).reshape(-1, 3), report)


def write_kg(kg: KnowledgeGraph, directory: str | os.PathLike) -> None:
    """Export as ``kg.tsv`` (names) plus ``entities.tsv`` and ``relations.tsv`` vocabularies."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_vocab(d / "entities.tsv", kg.entities, "entity")
    write_vocab(d / "relations.tsv", kg.relations, "relation")
    with open(d / "kg.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("head\trelation\ttail\n")
        for h, r, t in kg.triples:
            fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


def read_kg(directory: str | os.PathLike) -> KnowledgeGraph:
    d = Path(directory)
    entities = read_vocab(d / "entities.tsv")
    relations = read_vocab(d / "relations.tsv")
    e_idx = {e: i for i, e in enumerate(entities)}
    r_idx = {r: i for i, r in enumerate(relations)}
    rows = []
    with open(d / "kg.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            h, r, t = line.rstrip("\n").split("\t")
            rows.append((e_idx[h], r_idx[r], e_idx[t]))
    return KnowledgeGraph(tuple(entities), tuple(relations),
                          np.array(rows, dtype=np.int64).reshape(-1, 3))


def write_vocab(path, names: Iterable[str], column: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{column}\tid\n")
        for i, name in enumerate(names):
            fh.write(f"{name}\t{i}\n")


def read_vocab(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    names = [None] * len(rows)
    for name, i in rows:
        names[int(i)] = name
    return names


@dataclass(eq=False)
class RippleProfile:
    """Sampled ripple sets of one user.

    ``heads``/``relations``/``tails`` have shape ``(n_hop, n_memory)``; rows at or
    beyond ``depth`` are padding (-1) for hops cut short by a dead end.
    """

    user_id: str
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    depth: int
    unknown_items: int = 0

    @property
    def n_hop(self) -> int:
        return self.heads.shape[0]

    @property
    def n_memory(self) -> int:
        return self.heads.shape[1]

    @property
    def empty(self) -> bool:
        return self.depth == 0

    @property
    def truncated(self) -> bool:
        return 0 < self.depth < self.n_hop

    @property
    def hop_mask(self) -> np.ndarray:
        return np.arange(self.n_hop) < self.depth

    @property
    def hops(self) -> list[np.ndarray]:
        """One ``(n_memory, 3)`` triple array per hop; empty ``(0, 3)`` past ``depth``."""
        out = []
        for k in range(self.n_hop):
            if k < self.depth:
                out.append(np.stack([self.heads[k], self.relations[k], self.tails[k]], axis=1))
            else:
                out.append(np.empty((0, 3), dtype=np.int64))
        return out

    def __eq__(self, other):
        if not isinstance(other, RippleProfile):
            return NotImplemented
        return (self.user_id == other.user_id and self.depth == other.depth
                and self.unknown_items == other.unknown_items
                and np.array_equal(self.heads, other.heads)
                and np.array_equal(self.relations, other.relations)
                and np.array_equal(self.tails, other.tails))


def build_ripple_profile(history: Iterable[str], kg: KnowledgeGraph, n_hop: int, n_memory: int,
                         seed: int, user_id: str = "") -> RippleProfile:
    if n_hop < 1 or n_memory < 1:
        raise ValueError("n_hop and n_memory must be >= 1")
    rng = np.random.default_rng(seed)
    seeds = []
    unknown = 0
    for item in history:
        e = kg.item_entity(item)
        if e is None:
            unknown += 1
        else:
            seeds.append(e)
    shape = (n_hop, n_memory)
    heads = np.full(shape, -1, dtype=np.int64)
    rels = np.full(shape, -1, dtype=np.int64)
    tails = np.full(shape, -1, dtype=np.int64)
    depth = 0
    frontier = np.array(seeds, dtype=np.int64)
    for k in range(n_hop):
        cand = kg.triples_from(frontier)
        if len(cand) == 0:
            break
        pick = rng.choice(len(cand), size=n_memory, replace=len(cand) < n_memory)
        sampled = cand[pick]
        heads[k], rels[k], tails[k] = sampled.T
        depth = k + 1
        frontier = sampled[:, 2]
    return RippleProfile(user_id, heads, rels, tails, depth, unknown)


def user_seed(global_seed: int, user_id: str) -> int:
    digest = hashlib.blake2b(f"{global_seed}\x00{user_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def click_histories(bundle: DatasetBundle, rows: np.ndarray | None = None,
                    max_history: int | None = None) -> dict[str, list[str]]:
    """Clicked items per user in timestamp order, optionally keeping only the latest ``max_history``."""
    if rows is None:
        rows = np.arange(len(bundle.interactions))
    rows = np.asarray(rows, dtype=np.int64)
    rows = rows[bundle.clicks[rows] == 1]
    ts = np.array([bundle.interactions[i].get("event_timestamp_unix") or 0.0 for i in rows])
    rows = rows[np.argsort(ts, kind="stable")]
    out: dict[str, list[str]] = {}
    for i in rows:
        rec = bundle.interactions[i]
        out.setdefault(rec["user_id"], []).append(rec["item_id"])
    if max_history is not None:
        out = {u: h[-max_history:] for u, h in out.items()}
    return out


@dataclass(eq=False)
class ProfileStore:
    """All users' profiles packed into ``(n_users, n_hop, n_memory)`` arrays, users sorted by id."""

    user_ids: list[str]
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    depth: np.ndarray
    unknown_items: np.ndarray

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.user_ids)}

    def __len__(self):
        return len(self.user_ids)

    def __contains__(self, user_id):
        return user_id in self.index

    @property
    def n_hop(self) -> int:
        return self.heads.shape[1]

    @property
    def n_memory(self) -> int:
        return self.heads.shape[2]

    @property
    def hop_mask(self) -> np.ndarray:
        return np.arange(self.n_hop)[None, :] < self.depth[:, None]

    def get(self, user_id: str) -> RippleProfile | None:
        i = self.index.get(user_id)
        if i is None:
            return None
        return RippleProfile(user_id, self.heads[i].astype(np.int64), self.relations[i].astype(np.int64),
                             self.tails[i].astype(np.int64), int(self.depth[i]), int(self.unknown_items[i]))

    def has_profile(self, user_id: str) -> bool:
        i = self.index.get(user_id)
        return i is not None and self.depth[i] > 0

    @classmethod
    def from_profiles(cls, profiles: Iterable[RippleProfile], n_hop: int, n_memory: int) -> "ProfileStore":
        profiles = sorted(profiles, key=lambda p: p.user_id)
        U = len(profiles)
        store = cls(
            [p.user_id for p in profiles],
            np.full((U, n_hop, n_memory), -1, dtype=np.int32),
            np.full((U, n_hop, n_memory), -1, dtype=np.int32),
            np.full((U, n_hop, n_memory), -1, dtype=np.int32),
            np.array([p.depth for p in profiles], dtype=np.int32),
            np.array([p.unknown_items for p in profiles], dtype=np.int32),
        )
        for i, p in enumerate(profiles):
            store.heads[i], store.relations[i], store.tails[i] = p.heads, p.relations, p.tails
        return store

    def __eq__(self, other):
        if not isinstance(other, ProfileStore):
            return NotImplemented
        return (self.user_ids == other.user_ids
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("heads", "relations", "tails", "depth", "unknown_items")))


def build_all_profiles(histories: Mapping[str, list[str]], kg: KnowledgeGraph, n_hop: int = 5,
                       n_memory: int = 16, seed: int = 0, n_workers: int = 1) -> ProfileStore:
    """One profile per user in ``histories``; each user's sampler is seeded from
    ``(seed, user_id)`` so the result does not depend on order or worker count."""
    users = sorted(histories)

    def one(u):
        return build_ripple_profile(histories[u], kg, n_hop, n_memory, user_seed(seed, u), u)

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            profiles = list(pool.map(one, users))
    else:
        profiles = [one(u) for u in users]
    return ProfileStore.from_profiles(profiles, n_hop, n_memory)
