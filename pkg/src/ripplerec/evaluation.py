"""Impression-slate evaluation over temporal slices around a training day."""
from __future__ import annotations

import datetime as dt
import os
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass

import numpy as np

from .artifacts import ModelArtifacts, ScoredSlate, score_slates
from .dataset import DEFAULT_TIMEZONE, DatasetBundle
from .kg import KnowledgeGraph, ProfileStore
from .metrics import ndcg_at_k, precision_recall_at_k, rank_order
from .model import ModelConfig, ModelParameters

SLICES = ("train_minus_1", "train_day", "train_plus_1")
SLICE_LABELS = {"train_minus_1": "Train - 1", "train_day": "Train", "train_plus_1": "Train + 1"}
METRICS = ("ndcg", "precision", "recall")


@dataclass
class SliceReport:
    slice: str
    day: str | None
    ndcg: float | None
    precision: float | None
    recall: float | None
    n_users: int
    n_excluded_users: int = 0
    n_fallback_users: int = 0
    n_unresolved: int = 0
    cold_start_fraction: float = 0.0
    k: int = 10

    @property
    def absent(self) -> bool:
        return self.n_users == 0

    def to_dict(self) -> dict:
        return asdict(self)


def impression_slates(rows: Iterable[dict]) -> tuple[dict[str, list[str]], dict[tuple[str, str], int]]:
    """Per-user ordered unique items and a (user, item) -> clicked label map."""
    slates: dict[str, list[str]] = {}
    labels: dict[tuple[str, str], int] = {}
    for rec in rows:
        u, i = rec["user_id"], rec["item_id"]
        key = (u, i)
        if key not in labels:
            slates.setdefault(u, []).append(i)
            labels[key] = 0
        if rec.get("is_click") == 1:
            labels[key] = 1
    return slates, labels


def summarize(scored: Mapping[str, ScoredSlate], labels: Mapping[tuple[str, str], int], k: int,
              name: str = "", day: str | None = None) -> SliceReport:
    """Average NDCG/precision/recall@k over users with at least one positive."""
    sums = np.zeros(3)
    n_users = excluded = fallback = unresolved = 0
    cold = total = 0
    for user in sorted(scored):
        s = scored[user]
        unresolved += len(s.unresolved)
        ranked = [labels[(user, s.item_ids[i])] for i in rank_order(s.item_ids, s.scores)]
        n_pos = sum(ranked)
        if n_pos == 0:
            excluded += 1
            continue
        n_users += 1
        fallback += s.fallback
        cold += sum(p != "known" and p != "fallback" for p in s.provenance)
        total += len(s.item_ids)
        prec, rec = precision_recall_at_k(ranked, n_pos, k)
        sums += (ndcg_at_k(ranked, n_pos, k), prec, rec)
    if n_users == 0:
        return SliceReport(name, day, None, None, None, 0, excluded, 0, unresolved, 0.0, k)
    ndcg, prec, rec = sums / n_users
    return SliceReport(name, day, float(ndcg), float(prec), float(rec), n_users, excluded,
                       fallback, unresolved, cold / total if total else 0.0, k)


def evaluate_slice(artifacts: ModelArtifacts, rows: Iterable[dict], k: int = 10, content=None,
                   strategy: str | None = None, name: str = "", day: str | None = None) -> SliceReport:
    """Rank each user's logged impressions of one day and score the ranking against clicks."""
    slates, labels = impression_slates(rows)
    resolver = artifacts.resolver(content, strategy)
    scored = score_slates(artifacts, resolver, slates)
    return summarize(scored, labels, k, name, day)


def make_ndcg_evaluator(kg: KnowledgeGraph, profiles: ProfileStore, rows: list[dict], config: ModelConfig,
                        popularity: Mapping[str, int] | None = None, index=None, content=None,
                        strategy: str = "known_only", k: int = 10):
    """Validation callback for ``model.train``: mean NDCG@k on full impression slates."""
    slates, labels = impression_slates(rows)
    popularity = dict(popularity or {})

    def evaluate(params: ModelParameters) -> float:
        art = ModelArtifacts(config, params, kg, profiles, popularity, index, None, strategy)
        report = summarize(score_slates(art, art.resolver(content), slates), labels, k)
        return report.ndcg if report.ndcg is not None else 0.0

    return evaluate


def read_baseline_scores(path: str | os.PathLike) -> dict[tuple[str, str, str], float]:
    """TSV with header ``user_id item_id day score`` (day as YYYY-MM-DD)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        cols = {name.split(":")[0]: i for i, name in enumerate(header)}
        for line in fh:
            if not line.strip():
                continue
            cells = line.rstrip("\n").split("\t")
            out[(cells[cols["user_id"]], cells[cols["item_id"]], cells[cols["day"]])] = float(cells[cols["score"]])
    return out


def _baseline_slice(rows: list[dict], scores: Mapping[tuple[str, str, str], float], day: str,
                    k: int, name: str) -> SliceReport:
    slates, labels = impression_slates(rows)
    scored = {}
    for user, items in slates.items():
        s = np.array([scores.get((user, i, day), -np.inf) for i in items])
        scored[user] = ScoredSlate(user, items, s, ["baseline"] * len(items), False)
    return summarize(scored, labels, k, name, day)


@dataclass
class SliceComparison:
    train_date: str
    k: int
    reports: dict[str, SliceReport]
    baseline: dict[str, SliceReport] | None = None
    model_name: str = "RippleNet + Similarity"
    baseline_name: str = "Production baseline"

    def rows(self) -> list[tuple[str, dict[str, SliceReport]]]:
        out = []
        if self.baseline is not None:
            out.append((self.baseline_name, self.baseline))
        out.append((self.model_name, self.reports))
        return out

    def render_table(self) -> str:
        """Plain-text table: one row per model, metric groups of three slices."""
        k = self.k
        groups = [f"NDCG@{k}", f"Precision@{k}", f"Recall@{k}"]
        name_w = max(len(n) for n, _ in self.rows()) + 2
        cell = 11
        group_w = 3 * cell
        line1 = " " * name_w + "".join(f"{g:<{group_w}}| " for g in groups)
        line2 = f"{'Model':<{name_w}}" + "".join(
            "".join(f"{SLICE_LABELS[s]:<{cell}}" for s in SLICES) + "| " for _ in groups)
        lines = [line1.rstrip(), line2.rstrip(), "-" * len(line2.rstrip())]
        for name, reports in self.rows():
            cells = []
            for metric in METRICS:
                for s in SLICES:
                    rep = reports.get(s)
                    val = getattr(rep, metric) if rep is not None else None
                    cells.append(f"{val:.5f}" if val is not None else "n/a")
            body = ""
            for g in range(3):
                body += "".join(f"{c:<{cell}}" for c in cells[3 * g:3 * g + 3]) + "| "
            lines.append((f"{name:<{name_w}}" + body).rstrip())
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        cols = ["model", "slice", "day", "ndcg", "precision", "recall", "n_users",
                "n_excluded_users", "n_fallback_users", "n_unresolved", "cold_start_fraction"]
        out = ["\t".join(cols)]
        for name, reports in self.rows():
            for s in SLICES:
                rep = reports[s]
                d = rep.to_dict()
                vals = [name, s] + ["" if d[c] is None else str(d[c]) for c in cols[2:]]
                out.append("\t".join(vals))
        return "\n".join(out) + "\n"


def build_slice_report(artifacts: ModelArtifacts, bundle: DatasetBundle, train_date: str | dt.date,
                       k: int = 10, content=None, strategy: str | None = None,
                       timezone: str = DEFAULT_TIMEZONE,
                       baseline_scores: Mapping[tuple[str, str, str], float] | None = None) -> SliceComparison:
    """Evaluate the day before, the day of and the day after ``train_date``.

    A date without interactions yields an absent report for that slice.
    """
    if isinstance(train_date, str):
        train_date = dt.date.fromisoformat(train_date)
    days = bundle.local_days(timezone)
    reports, baseline = {}, ({} if baseline_scores is not None else None)
    for offset, name in zip((-1, 0, 1), SLICES):
        day = train_date + dt.timedelta(days=offset)
        rows = [bundle.interactions[i] for i in np.flatnonzero(days == day)]
        iso = day.isoformat()
        if not rows:
            reports[name] = SliceReport(name, iso, None, None, None, 0, k=k)
            if baseline is not None:
                baseline[name] = SliceReport(name, iso, None, None, None, 0, k=k)
            continue
        reports[name] = evaluate_slice(artifacts, rows, k, content, strategy, name, iso)
        if baseline is not None:
            baseline[name] = _baseline_slice(rows, baseline_scores, iso, k, name)
    return SliceComparison(train_date.isoformat(), k, reports, baseline)
