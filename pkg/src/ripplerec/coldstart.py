"""Cold-start bridges from content embeddings to model embeddings.

Two strategies place an unseen item in model space: a feedforward encoder
trained with a cosine objective, and replacement by the trained embedding of
the known item with the most cosine-similar content embedding.
"""
from __future__ import annotations

import hashlib
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .dataset import EMBEDDING_DIM
from .kg import KnowledgeGraph
from .model import ColdStartUnresolved, ModelParameters

STRATEGIES = ("known_only", "similarity", "encoder")
HIST_BINS = 50
TIE_TOLERANCE = 1e-12
_NORM_EPS = 1e-12


class BridgeError(ValueError):
    pass


# --- content providers -------------------------------------------------------

class ContentProvider(Protocol):
    def embed(self, item: dict) -> np.ndarray | None: ...


class ColumnEmbeddingProvider:
    """Reads the precomputed embedding stored in the item file."""

    def __init__(self, column: str = "openai_embedding"):
        self.column = column

    def embed(self, item: dict) -> np.ndarray | None:
        values = item.get(self.column)
        if values is None:
            return None
        return np.asarray(values, dtype=np.float64)


class HashingTextProvider:
    """Deterministic pseudo-embedding from a hash of the item text. For tests; no semantics."""

    def __init__(self, dim: int = EMBEDDING_DIM, fields=("title", "lead", "text")):
        self.dim = dim
        self.fields = fields

    def embed(self, item: dict) -> np.ndarray | None:
        text = "\n".join(str(item.get(f) or "") for f in self.fields)
        seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)


# --- encoder -----------------------------------------------------------------

@dataclass
class EncoderConfig:
    hidden: tuple[int, ...] = (128, 64)
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 64
    holdout_fraction: float = 0.1
    seed: int = 0


@dataclass(eq=False)
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other):
        if not isinstance(other, EncoderParams) or len(self.weights) != len(other.weights):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases,
                                                          other.weights + other.biases))


def init_encoder(in_dim: int, out_dim: int, hidden=(128, 64), seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / a)
        weights.append(rng.uniform(-bound, bound, (a, b)))
        biases.append(np.zeros(b))
    return EncoderParams(weights, biases)


def _encoder_forward(enc: EncoderParams, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    last = len(enc.weights) - 1
    for i, (W, b) in enumerate(zip(enc.weights, enc.biases)):
        zl = a @ W + b
        pre.append(zl)
        a = zl if i == last else np.maximum(zl, 0.0)
        acts.append(a)
    return acts, pre


def encode_content(enc: EncoderParams, content: np.ndarray) -> np.ndarray:
    x = np.asarray(content, dtype=np.float64)
    if x.shape[-1] != enc.in_dim:
        raise BridgeError(f"content embedding has length {x.shape[-1]}, encoder expects {enc.in_dim}")
    acts, _ = _encoder_forward(enc, x.reshape(-1, enc.in_dim))
    out = acts[-1]
    return out[0] if x.ndim == 1 else out


def cosine_loss(enc: EncoderParams, X: np.ndarray, Y: np.ndarray) -> tuple[float, EncoderParams]:
    """Mean ``1 - cos(encoder(x), y)`` and its exact gradient (returned in EncoderParams layout)."""
    n = len(X)
    acts, pre = _encoder_forward(enc, X)
    F = acts[-1]
    nf = np.sqrt((F ** 2).sum(axis=1) + _NORM_EPS)
    ny = np.linalg.norm(Y, axis=1)
    dots = (F * Y).sum(axis=1)
    cos = dots / (nf * ny)
    loss = float(np.mean(1.0 - cos))
    # d(-cos)/dF
    g = -(Y / (nf * ny)[:, None] - (dots / (nf ** 3 * ny))[:, None] * F) / n
    gW, gb = [None] * len(enc.weights), [None] * len(enc.weights)
    for i in range(len(enc.weights) - 1, -1, -1):
        if i != len(enc.weights) - 1:
            g = g * (pre[i] > 0)
        gW[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ enc.weights[i].T
    return loss, EncoderParams(gW, gb)


@dataclass
class EncoderTrainResult:
    params: EncoderParams
    curve: list[dict] = field(default_factory=list)
    skipped: int = 0
    n_train: int = 0
    n_holdout: int = 0


def train_encoder(contents: np.ndarray, targets: np.ndarray,
                  config: EncoderConfig | None = None) -> EncoderTrainResult:
    """Fit the encoder to map content embeddings onto trained model embeddings.

    Pairs whose target has zero norm are skipped. A ``holdout_fraction`` of the
    remaining pairs is kept aside and its loss reported per epoch.
    """
    cfg = config or EncoderConfig()
    X = np.asarray(contents, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    keep = np.linalg.norm(Y, axis=1) > 0
    skipped = int((~keep).sum())
    X, Y = X[keep], Y[keep]
    if len(X) < 2:
        raise BridgeError("encoder training needs at least 2 usable pairs")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(X))
    n_hold = int(round(cfg.holdout_fraction * len(X)))
    n_hold = min(n_hold, len(X) - 1)
    hold, fit = perm[:n_hold], perm[n_hold:]
    enc = init_encoder(X.shape[1], Y.shape[1], cfg.hidden, cfg.seed)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(fit)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grad = cosine_loss(enc, X[idx], Y[idx])
            total += loss * len(idx)
            for p, gp in zip(enc.weights + enc.biases, grad.weights + grad.biases):
                p -= cfg.learning_rate * gp
        entry = {"epoch": epoch, "train_loss": total / len(order)}
        if n_hold:
            entry["holdout_loss"] = cosine_loss(enc, X[hold], Y[hold])[0]
        curve.append(entry)
    return EncoderTrainResult(enc, curve, skipped, len(fit), n_hold)


# --- similarity index --------------------------------------------------------

@dataclass(eq=False)
class SimilarityIndex:
    """Known items (sorted ids) with unit-norm content vectors and their model entity ids."""

    item_ids: tuple[str, ...]
    vectors: np.ndarray
    entity_ids: np.ndarray
    excluded_zero_norm: int = 0
    excluded_missing: int = 0

    def __len__(self):
        return len(self.item_ids)


def build_similarity_index(kg: KnowledgeGraph, content: Mapping[str, np.ndarray | None],
                           known_items=None) -> SimilarityIndex:
    """Index every item entity of ``kg`` (optionally only ``known_items``) that has content."""
    candidates = sorted(known_items) if known_items is not None else kg.item_ids()
    ids, vecs, ents = [], [], []
    zero = missing = 0
    for item in candidates:
        e = kg.item_entity(item)
        if e is None:
            continue
        vec = content.get(item)
        if vec is None:
            missing += 1
            continue
        vec = np.asarray(vec, dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0 or not np.isfinite(norm):
            zero += 1
            continue
        ids.append(item)
        vecs.append(vec / norm)
        ents.append(e)
    if not ids:
        raise BridgeError("no known items with usable content embeddings")
    return SimilarityIndex(tuple(ids), np.array(vecs), np.array(ents, dtype=np.int64), zero, missing)


def nearest_known_item(index: SimilarityIndex, query: np.ndarray) -> tuple[str, float]:
    """Exact cosine argmax; equal similarities resolve to the smallest item id."""
    q = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0 or not np.isfinite(norm):
        raise BridgeError("query content embedding has zero or non-finite norm")
    if len(index) == 0:
        raise BridgeError("empty similarity index")
    sims = index.vectors @ (q / norm)
    # parallel vectors can differ by an ulp after normalization; ids are sorted
    best = int(np.flatnonzero(sims >= sims.max() - TIE_TOLERANCE)[0])
    return index.item_ids[best], float(sims[best])


# --- resolution --------------------------------------------------------------

@dataclass
class Resolution:
    vector: np.ndarray
    provenance: str
    matched_id: str | None = None
    cosine: float | None = None

    @property
    def cold(self) -> bool:
        return self.provenance != "known"


def resolve_embedding(item_id: str, params: ModelParameters, kg: KnowledgeGraph,
                      index: SimilarityIndex | None = None, encoder: EncoderParams | None = None,
                      strategy: str = "similarity", content: np.ndarray | None = None) -> Resolution:
    """Model-space vector for an item: its trained row when known, otherwise bridged."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    e = kg.item_entity(item_id)
    if e is not None:
        return Resolution(params.entity_emb[e], "known")
    if strategy == "known_only":
        raise ColdStartUnresolved(f"item {item_id!r} unseen in training")
    if content is None:
        raise ColdStartUnresolved(f"item {item_id!r} unseen and has no content embedding")
    if strategy == "similarity":
        if index is None:
            raise BridgeError("similarity strategy requires a similarity index")
        match, cos = nearest_known_item(index, content)
        return Resolution(params.entity_emb[kg.item_entity(match)], f"matched:{match}", match, cos)
    if encoder is None:
        raise BridgeError("encoder strategy requires a trained encoder")
    return Resolution(encode_content(encoder, content), "encoded")


class EmbeddingResolver:
    """Caching ``resolve_embedding`` over one model, with item content looked up on demand."""

    def __init__(self, params: ModelParameters, kg: KnowledgeGraph, strategy: str = "similarity",
                 index: SimilarityIndex | None = None, encoder: EncoderParams | None = None,
                 content: Callable[[str], np.ndarray | None] | Mapping | None = None):
        self.params, self.kg, self.strategy = params, kg, strategy
        self.index, self.encoder = index, encoder
        if isinstance(content, Mapping):
            table = content
            content = table.get
        self._content = content or (lambda item_id: None)
        self._cache: dict[str, Resolution] = {}

    def resolve(self, item_id: str) -> Resolution:
        res = self._cache.get(item_id)
        if res is None:
            emb = None if self.kg.item_entity(item_id) is not None else self._content(item_id)
            res = resolve_embedding(item_id, self.params, self.kg, self.index, self.encoder,
                                    self.strategy, emb)
            self._cache[item_id] = res
        return res


def item_contents(items: Mapping[str, dict], provider: ContentProvider | None = None) -> dict[str, np.ndarray | None]:
    provider = provider or ColumnEmbeddingProvider()
    return {item_id: provider.embed(rec) for item_id, rec in items.items()}


# --- diagnostics -------------------------------------------------------------

@dataclass
class BridgeReport:
    strategy: str
    item_ids: list[str]
    matched_ids: list[str | None]
    cosines: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    median: float


def _cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    num = (A * B).sum(axis=1)
    den = np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def similarity_histogram(resolved: np.ndarray, true: np.ndarray, strategy: str = "similarity",
                         item_ids=None, matched_ids=None, bins: int = HIST_BINS) -> BridgeReport:
    """Histogram of cosine(resolved, true) over ``bins`` equal bins on [-1, 1]."""
    A = np.asarray(resolved, dtype=np.float64)
    B = np.asarray(true, dtype=np.float64)
    if len(A) == 0:
        raise BridgeError("no pairs to evaluate")
    if A.shape != B.shape:
        raise BridgeError("resolved and true vectors differ in shape")
    cos = _cosine_rows(A, B)
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    ids = list(item_ids) if item_ids is not None else [str(i) for i in range(len(A))]
    matched = list(matched_ids) if matched_ids is not None else [None] * len(A)
    return BridgeReport(strategy, ids, matched, cos, counts, edges,
                        float(cos.mean()), float(np.median(cos)))


def evaluate_bridge(params: ModelParameters, kg: KnowledgeGraph, content: Mapping[str, np.ndarray | None],
                    strategy: str = "similarity", holdout_fraction: float = 0.1, seed: int = 0,
                    encoder_config: EncoderConfig | None = None) -> BridgeReport:
    """Hide a fraction of known items, bridge them as if unseen, compare with their trained rows."""
    full = build_similarity_index(kg, content)
    rng = np.random.default_rng(seed)
    n = len(full)
    n_hold = max(1, int(round(holdout_fraction * n)))
    if n_hold >= n:
        raise BridgeError("not enough known items to hold some out")
    hold = np.sort(rng.permutation(n)[:n_hold])
    rest = np.setdiff1d(np.arange(n), hold)
    E = params.entity_emb.astype(np.float64)
    true = E[full.entity_ids[hold]]
    held_ids = [full.item_ids[i] for i in hold]
    if strategy == "similarity":
        index = SimilarityIndex(tuple(full.item_ids[i] for i in rest), full.vectors[rest],
                                full.entity_ids[rest])
        matched, vecs = [], []
        for i in hold:
            mid, _ = nearest_known_item(index, full.vectors[i])
            matched.append(mid)
            vecs.append(E[kg.item_entity(mid)])
        return similarity_histogram(np.array(vecs), true, strategy, held_ids, matched)
    if strategy == "encoder":
        X = np.array([content[full.item_ids[i]] for i in rest], dtype=np.float64)
        res = train_encoder(X, E[full.entity_ids[rest]], encoder_config)
        Xh = np.array([content[i] for i in held_ids], dtype=np.float64)
        return similarity_histogram(encode_content(res.params, Xh), true, strategy, held_ids)
    raise ValueError(f"strategy must be 'similarity' or 'encoder', got {strategy!r}")


def write_bridge_report(report: BridgeReport, tsv_path: str | os.PathLike,
                        csv_path: str | os.PathLike) -> None:
    with open(tsv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id\tstrategy\tmatched_id\tcosine\n")
        for item, match, cos in zip(report.item_ids, report.matched_ids, report.cosines):
            fh.write(f"{item}\t{report.strategy}\t{match or ''}\t{cos!r}\n")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(report.edges[:-1], report.edges[1:], report.counts):
            fh.write(f"{lo:.2f},{hi:.2f},{int(c)}\n")
