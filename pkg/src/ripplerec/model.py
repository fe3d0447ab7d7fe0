"""Ripple-set preference propagation model, its loss with exact gradients, and SGD training.

Forward pass for a user with ripple sets ``(h_i, r_i, t_i)`` per hop and a
candidate item vector ``v``::

    a_i  = v^T R[r_i] E[h_i]            attention logit
    p    = softmax(a) over the hop
    o^k  = sum_i p_i E[t_i]             hop response
    u    = sum_k o^k                    user vector (non-empty hops only)
    y    = sigmoid(u . v)

Parameters are stored as float32; every reduction runs in float64.
"""
from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .kg import KnowledgeGraph, ProfileStore, RippleProfile

logger = logging.getLogger(__name__)

INIT_SCALE = 0.08


class NumericError(FloatingPointError):
    """Non-finite loss or gradient. ``checkpoint`` holds the last good parameters when raised by ``train``."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.checkpoint: ModelParameters | None = None
        self.log: list[dict] = []


class ColdStartUnresolved(KeyError):
    pass


@dataclass
class ModelConfig:
    dim: int = 16
    n_hop: int = 5
    n_memory: int = 16
    learning_rate: float = 0.01
    max_epochs: int = 50
    patience: int = 5
    l2_weight: float = 1e-5
    kge_weight: float = 0.01
    batch_size: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_hop < 1 or self.n_memory < 1:
            raise ValueError("n_hop and n_memory must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1 or self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("patience and batch_size must be >= 1, max_epochs >= 0")
        if self.l2_weight < 0 or self.kge_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ModelParameters:
    entity_emb: np.ndarray     # (n_entities, d)
    relation_mat: np.ndarray   # (n_relations, d, d)

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.entity_emb.copy(), self.relation_mat.copy())

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.entity_emb.astype(dtype), self.relation_mat.astype(dtype))

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return (np.array_equal(self.entity_emb, other.entity_emb)
                and np.array_equal(self.relation_mat, other.relation_mat))


def init_parameters(n_entities: int, n_relations: int, dim: int = 16, seed: int = 0) -> ModelParameters:
    if n_entities < 1 or n_relations < 1 or dim < 1:
        raise ValueError("vocabulary sizes and dim must be >= 1")
    rng = np.random.default_rng(seed)
    E = rng.uniform(-INIT_SCALE, INIT_SCALE, (n_entities, dim)).astype(np.float32)
    R = rng.uniform(-INIT_SCALE, INIT_SCALE, (n_relations, dim, dim)).astype(np.float32)
    return ModelParameters(E, R)


@dataclass
class Prediction:
    score: float
    attention: list[np.ndarray]
    user_vector: np.ndarray
    logit: float = 0.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: ModelParameters, heads, rels, tails, mask, v):
    """Batched forward pass; ``v`` is ``(B, d)`` float64. Returns a cache for backprop."""
    E, R = params.entity_emb, params.relation_mat
    valid = mask[:, :, None] & (heads >= 0)
    h = np.where(valid, heads, 0)
    r = np.where(valid, rels, 0)
    t = np.where(valid, tails, 0)
    hE = E[h].astype(np.float64)                               # (B,H,M,d)
    tE = E[t].astype(np.float64)
    R64 = R.astype(np.float64)
    vR = np.einsum("bi,rij->brj", v, R64)                      # (B,nr,d)
    vRg = vR[np.arange(len(v))[:, None, None], r]              # (B,H,M,d)
    logits = np.einsum("bhmd,bhmd->bhm", vRg, hE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=-1, keepdims=True)
    o = np.einsum("bhm,bhmd->bhd", p, tE)
    u = (o * mask[:, :, None]).sum(axis=1)
    z = np.einsum("bd,bd->b", u, v)
    return dict(h=h, r=r, t=t, hE=hE, tE=tE, R64=R64, vRg=vRg, p=p, u=u, z=z, v=v,
                mask=mask, valid=valid)


def _as_batch(profiles: list[RippleProfile]):
    heads = np.stack([p.heads for p in profiles]).astype(np.int64)
    rels = np.stack([p.relations for p in profiles]).astype(np.int64)
    tails = np.stack([p.tails for p in profiles]).astype(np.int64)
    mask = np.stack([p.hop_mask for p in profiles])
    return heads, rels, tails, mask


def score_candidate(params: ModelParameters, profile: RippleProfile, candidate: int | None = None,
                    vector: np.ndarray | None = None) -> Prediction:
    """Click probability of one candidate for one user.

    The candidate is an entity id (its row of the embedding table) or an
    explicit model-space ``vector`` supplied by a cold-start bridge.
    """
    if vector is None:
        if candidate is None or not 0 <= candidate < len(params.entity_emb):
            raise ColdStartUnresolved(f"candidate {candidate!r} has no embedding and no vector was supplied")
        vector = params.entity_emb[candidate]
    v = np.asarray(vector, dtype=np.float64).reshape(1, -1)
    c = _forward(params, *_as_batch([profile]), v)
    attention = [c["p"][0, k].copy() for k in range(profile.depth)]
    z = float(c["z"][0])
    return Prediction(float(_sigmoid(z)), attention, c["u"][0].copy(), z)


def score_batch(params: ModelParameters, heads, rels, tails, mask, vectors) -> np.ndarray:
    """Scores for aligned rows of profile arrays and candidate vectors."""
    v = np.asarray(vectors, dtype=np.float64)
    if len(v) == 0:
        return np.empty(0)
    c = _forward(params, np.asarray(heads, np.int64), np.asarray(rels, np.int64),
                 np.asarray(tails, np.int64), np.asarray(mask, bool), v)
    return _sigmoid(c["z"])


def score_user(params: ModelParameters, profile: RippleProfile, vectors: np.ndarray) -> np.ndarray:
    """Scores of many candidate vectors against a single profile."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if n == 0:
        return np.empty(0)
    heads, rels, tails, mask = _as_batch([profile])
    rep = lambda a: np.repeat(a, n, axis=0)
    return score_batch(params, rep(heads), rep(rels), rep(tails), rep(mask), vectors)


@dataclass
class Gradients:
    entity_emb: np.ndarray
    relation_mat: np.ndarray


def batch_loss(params: ModelParameters, heads, rels, tails, mask, items, labels,
               kge_weight: float = 0.0, l2_weight: float = 0.0) -> tuple[float, Gradients]:
    """Mean BCE + ``kge_weight`` * KG term + ``l2_weight`` * squared norm of touched parameters.

    The KG term is the mean over the batch's ripple triples of
    ``(sigmoid(E[h]^T R[r] E[t]) - 1)^2``. Gradients are exact and returned
    dense, in float64.
    """
    heads = np.asarray(heads, np.int64)
    rels = np.asarray(rels, np.int64)
    tails = np.asarray(tails, np.int64)
    mask = np.asarray(mask, bool)
    items = np.asarray(items, np.int64)
    y = np.asarray(labels, np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    B = len(items)
    E = params.entity_emb
    nr, d = params.relation_mat.shape[0], params.dim
    v = E[items].astype(np.float64)
    c = _forward(params, heads, rels, tails, mask, v)
    z, u, p, R64 = c["z"], c["u"], c["p"], c["R64"]

    # BCE from logits: log(1+e^z) - y z, stable for large |z|
    bce = np.logaddexp(0.0, z) - y * z
    loss = bce.mean()
    gz = (_sigmoid(z) - y) / B

    gE = np.zeros(E.shape, dtype=np.float64)
    gR = np.zeros(params.relation_mat.shape, dtype=np.float64)

    gu = gz[:, None] * v
    gv = gz[:, None] * u
    go = gu[:, None, :] * mask[:, :, None]
    gtE = p[..., None] * go[:, :, None, :]
    gp = np.einsum("bhmd,bhd->bhm", c["tE"], go)
    ga = p * (gp - (p * gp).sum(axis=-1, keepdims=True))
    ghE = ga[..., None] * c["vRg"]
    gvRg = ga[..., None] * c["hE"]
    onehot = np.zeros(c["r"].shape + (nr,))
    np.put_along_axis(onehot, c["r"][..., None], 1.0, axis=-1)
    G = np.einsum("bhmr,bhmj->brj", onehot, gvRg)
    gv += np.einsum("brj,rij->bi", G, R64)
    gR += np.einsum("bi,brj->rij", v, G)

    np.add.at(gE, c["h"].ravel(), ghE.reshape(-1, d))
    np.add.at(gE, c["t"].ravel(), gtE.reshape(-1, d))
    np.add.at(gE, items, gv)

    valid = c["valid"]
    n_trip = int(valid.sum())
    kge = 0.0
    if kge_weight and n_trip:
        vh, vr, vt = c["h"][valid], c["r"][valid], c["t"][valid]
        Hm, Tm = c["hE"][valid], c["tE"][valid]
        for rel in np.unique(vr):
            sel = vr == rel
            Hr, Tr, Rr = Hm[sel], Tm[sel], R64[rel]
            s = np.einsum("ni,ni->n", Hr @ Rr, Tr)
            q = _sigmoid(s)
            kge += ((q - 1.0) ** 2).sum()
            coef = kge_weight * 2.0 / n_trip * (q - 1.0) * q * (1.0 - q)
            np.add.at(gE, vh[sel], coef[:, None] * (Tr @ Rr.T))
            np.add.at(gE, vt[sel], coef[:, None] * (Hr @ Rr))
            gR[rel] += (coef[:, None] * Hr).T @ Tr
        kge /= n_trip
        loss += kge_weight * kge

    if l2_weight:
        ents = np.unique(np.concatenate([items, c["h"][valid], c["t"][valid]]))
        rels_t = np.unique(c["r"][valid])
        Et = E[ents].astype(np.float64)
        Rt = R64[rels_t]
        loss += l2_weight * ((Et ** 2).sum() + (Rt ** 2).sum())
        gE[ents] += 2.0 * l2_weight * Et
        gR[rels_t] += 2.0 * l2_weight * Rt

    if not np.isfinite(loss) or not (np.isfinite(gE).all() and np.isfinite(gR).all()):
        raise NumericError("non-finite loss or gradient", {
            "loss": float(loss), "batch_size": B, "bce": float(bce.mean()), "kge": float(kge),
            "max_abs_logit": float(np.abs(z).max()) if B else 0.0,
        })
    return float(loss), Gradients(gE, gR)


@dataclass
class TrainingExamples:
    """Aligned arrays: profile-store row, candidate entity id, click label."""

    user_rows: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.items)


def make_examples(pairs: list[tuple[str, str, int]], kg: KnowledgeGraph,
                  profiles: ProfileStore) -> TrainingExamples:
    """Keep ``(user_id, item_id, label)`` rows whose user has a non-empty profile and whose item is an entity."""
    rows, items, labels = [], [], []
    dropped = 0
    for user, item, label in pairs:
        e = kg.item_entity(item)
        if e is None or not profiles.has_profile(user):
            dropped += 1
            continue
        rows.append(profiles.index[user])
        items.append(e)
        labels.append(int(label))
    return TrainingExamples(np.array(rows, dtype=np.int64), np.array(items, dtype=np.int64),
                            np.array(labels, dtype=np.int8), dropped)


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float | None = None
    stopped_epoch: int = 0


def sgd_step(params: ModelParameters, grads: Gradients, lr: float) -> None:
    params.entity_emb -= (lr * grads.entity_emb).astype(params.entity_emb.dtype)
    params.relation_mat -= (lr * grads.relation_mat).astype(params.relation_mat.dtype)


def train(kg: KnowledgeGraph, profiles: ProfileStore, examples: TrainingExamples, config: ModelConfig,
          evaluator: Callable[[ModelParameters], float] | None = None,
          params: ModelParameters | None = None) -> TrainResult:
    """Minibatch SGD with early stopping on ``evaluator`` (validation NDCG@10).

    The evaluator runs once before the first update (epoch 0) and after each
    epoch; the best-scoring parameters are returned. Training stops after
    ``patience`` epochs without strict improvement, or at ``max_epochs``.
    """
    config.validate()
    if len(examples) == 0:
        raise ValueError("no training examples")
    if profiles.n_hop != config.n_hop or profiles.n_memory != config.n_memory:
        raise ValueError("profile store shape does not match n_hop/n_memory")
    if params is None:
        params = init_parameters(kg.n_entities, kg.n_relations, config.dim, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    mask_all = profiles.hop_mask

    log: list[dict] = []
    best_metric = evaluator(params) if evaluator else None
    best_epoch = 0
    best_params = params.copy()
    log.append({"epoch": 0, "loss": None, "valid_ndcg": best_metric,
                "best_ndcg": best_metric, "best_epoch": 0})
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            rows = examples.user_rows[idx]
            try:
                loss, grads = batch_loss(
                    params, profiles.heads[rows], profiles.relations[rows], profiles.tails[rows],
                    mask_all[rows], examples.items[idx], examples.labels[idx],
                    config.kge_weight, config.l2_weight)
            except NumericError as err:
                err.diagnostics["epoch"] = epoch
                err.checkpoint = best_params
                err.log = log
                raise
            sgd_step(params, grads, config.learning_rate)
            total += loss * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "loss": total / count}
        if evaluator:
            metric = evaluator(params)
            if metric > best_metric:
                best_metric, best_epoch = metric, epoch
                best_params = params.copy()
            entry.update(valid_ndcg=metric, best_ndcg=best_metric, best_epoch=best_epoch)
        else:
            best_params, best_epoch = params.copy(), epoch
            entry.update(valid_ndcg=None, best_ndcg=None, best_epoch=epoch)
        log.append(entry)
        logger.info("epoch %d loss %.5f valid %s", epoch, entry["loss"], entry["valid_ndcg"])
        if evaluator and epoch - best_epoch >= config.patience:
            break
    return TrainResult(best_params, log, best_epoch, best_metric, epoch)
