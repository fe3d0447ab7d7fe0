"""Recbole atomic files: parsing, writing, bundles, temporal splits, synthetic data.

An atomic file is UTF-8 text with LF line endings. The first line is a
tab-separated header of ``name:kind`` tokens, every following line holds one
tab-separated row. ``*_seq`` values are space-separated and the empty string
encodes an absent value.
"""
from __future__ import annotations

import datetime as dt
import io
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable
from zoneinfo import ZoneInfo

import numpy as np

KINDS = ("token", "token_seq", "float", "float_seq")
FILE_KINDS = ("inter", "user", "item")
DEFAULT_TIMEZONE = "Europe/Warsaw"
EMBEDDING_DIM = 256
N_CATEGORIES = 10
CATEGORIES = (
    "news", "sport", "business", "culture", "technology",
    "health", "automotive", "travel", "lifestyle", "science",
)

# key columns each file must carry
_REQUIRED = {"inter": ("user_id", "item_id"), "user": ("user_id",), "item": ("item_id",)}

# .inter columns, in the order the synthetic generator writes them
INTER_FIELDS = (
    ("user_id", "token"), ("item_id", "token"), ("is_click", "float"),
    ("event_timestamp_unix", "float"), ("event_date", "token"), ("weekday", "float"),
    ("hour", "float"), ("is_business_day", "float"),
    ("ip_cnt", "float"), ("pu_ip_cnt", "float"), ("pv_cnt", "float"), ("glowna_ip_cnt", "float"),
    ("pv_on_content_publication_premium_cnt", "float"), ("ses_duration_sum", "float"),
    ("device_type", "token"), ("context_client_brand", "token"), ("context_client_version", "token"),
    ("cs", "token"), ("rh_user_agent", "token"),
    ("latitude", "float"), ("longitude", "float"), ("accuracy_radius", "float"),
    ("geoip_city_name", "token"), ("geoip_region_name", "token"),
    ("is_active_click", "float"), ("is_active_pageview", "float"),
    ("user_evoked_sso_logged_in", "float"), ("user_subscriber", "float"),
    ("lts_pred", "float"),
)
USER_FIELDS = (
    ("user_id", "token"), ("category_preferences", "float_seq"),
    ("user_sso_name", "token"), ("browser", "token"), ("device", "token"),
)
ITEM_FIELDS = (
    ("item_id", "token"), ("title", "token"), ("lead", "token"), ("text", "token"),
    ("text_length", "float"), ("author", "token"), ("images", "token_seq"),
    ("wikidata_entities_words", "token_seq"), ("wikidata_entities_ids", "token_seq"),
    ("wikidata_entities_scores", "float_seq"), ("wikidata_topics", "token_seq"),
    ("wikidata_topics_scores", "float_seq"), ("content_publication_premium", "float"),
    ("openai_embedding", "float_seq"), ("bert_category_scores", "float_seq"),
    ("stylometrix_title", "float_seq"), ("stylometrix_lead", "float_seq"),
    ("stylometrix_text", "float_seq"),
)


class DatasetError(ValueError):
    """Base class for malformed or insufficient data."""


class SchemaError(DatasetError):
    pass


class RowError(DatasetError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FieldValueError(DatasetError):
    pass


class InsufficientDataError(DatasetError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str

    def __post_init__(self):
        if not self.name:
            raise SchemaError("empty field name")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")

    @property
    def header(self) -> str:
        return f"{self.name}:{self.kind}"


def field_specs(pairs: Iterable[tuple[str, str]]) -> list[FieldSpec]:
    return [FieldSpec(n, k) for n, k in pairs]


def format_float(x: float) -> str:
    """Shortest text that parses back to ``x``; integral values drop the ``.0``."""
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def _parse_header(line: str) -> list[FieldSpec]:
    specs = []
    seen = set()
    for token in line.split("\t"):
        name, sep, kind = token.rpartition(":")
        if not sep:
            raise SchemaError(f"column {token!r}: header token lacks ':kind'")
        if kind not in KINDS:
            raise SchemaError(f"column {name!r}: unknown kind {kind!r}")
        if name in seen:
            raise SchemaError(f"column {name!r}: duplicate name")
        seen.add(name)
        specs.append(FieldSpec(name, kind))
    return specs


def _coerce(raw: str, spec: FieldSpec, line: int):
    if raw == "":
        return None
    try:
        if spec.kind == "token":
            return raw
        if spec.kind == "token_seq":
            return raw.split(" ")
        if spec.kind == "float":
            return float(raw)
        return [float(v) for v in raw.split(" ")]
    except ValueError:
        raise FieldValueError(
            f"line {line}: column {spec.name!r}: non-numeric value {raw!r}"
        ) from None


def _format_value(value, spec: FieldSpec) -> str:
    if value is None:
        return ""
    if spec.kind == "token":
        return str(value)
    if spec.kind == "token_seq":
        return " ".join(str(v) for v in value)
    if spec.kind == "float":
        return format_float(value)
    return " ".join(format_float(v) for v in value)


def _validate_record(rec: dict, kind: str, line: int) -> None:
    if kind == "inter":
        click = rec.get("is_click")
        if click is not None and click not in (0.0, 1.0):
            raise FieldValueError(f"line {line}: is_click must be 0 or 1, got {click}")
        ts = rec.get("event_timestamp_unix")
        if ts is not None and not ts > 0:
            raise FieldValueError(f"line {line}: event_timestamp_unix must be positive")
    elif kind == "item":
        emb = rec.get("openai_embedding")
        if emb is not None and len(emb) != EMBEDDING_DIM:
            raise FieldValueError(
                f"line {line}: openai_embedding has length {len(emb)}, expected {EMBEDDING_DIM}"
            )
        for ids, scores in (("wikidata_entities_ids", "wikidata_entities_scores"),
                            ("wikidata_topics", "wikidata_topics_scores")):
            a, b = rec.get(ids), rec.get(scores)
            if a is not None and b is not None and len(a) != len(b):
                raise FieldValueError(f"line {line}: {ids} and {scores} differ in length")
    elif kind == "user":
        prefs = rec.get("category_preferences")
        if prefs is not None:
            if len(prefs) != N_CATEGORIES or abs(sum(prefs) - 1.0) > 1e-6:
                raise FieldValueError(
                    f"line {line}: category_preferences must be {N_CATEGORIES} floats summing to 1"
                )


def _open_text(source, mode: str):
    if isinstance(source, (str, os.PathLike)):
        return open(source, mode, encoding="utf-8", newline="\n"), True
    return source, False


def parse_atomic_file(source: str | os.PathLike | IO[str],
                      expected_kind: str | None = None) -> tuple[list[dict], list[FieldSpec]]:
    """Parse an atomic file into ``(records, fields)``.

    Each record maps field name to a coerced value (``str``, ``list[str]``,
    ``float`` or ``list[float]``); empty cells become ``None``. When
    ``expected_kind`` is given the key columns and per-kind value rules of
    that file type are enforced.
    """
    if expected_kind is not None and expected_kind not in FILE_KINDS:
        raise ValueError(f"expected_kind must be one of {FILE_KINDS}")
    fh, close = _open_text(source, "r")
    try:
        header = fh.readline()
        if not header:
            raise SchemaError("missing header line")
        fields = _parse_header(header.rstrip("\n"))
        if expected_kind is not None:
            names = {f.name for f in fields}
            for col in _REQUIRED[expected_kind]:
                if col not in names:
                    raise SchemaError(f"column {col!r} required in .{expected_kind} file")
        records = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if line == "":
                continue
            cells = line.split("\t")
            if len(cells) != len(fields):
                raise RowError(f"expected {len(fields)} columns, found {len(cells)}", lineno)
            rec = {spec.name: _coerce(raw, spec, lineno) for raw, spec in zip(cells, fields)}
            if expected_kind is not None:
                _validate_record(rec, expected_kind, lineno)
            records.append(rec)
    finally:
        if close:
            fh.close()
    return records, fields


def write_atomic_file(dest: str | os.PathLike | IO[str], records: Iterable[dict],
                      fields: list[FieldSpec]) -> None:
    fh, close = _open_text(dest, "w")
    try:
        fh.write("\t".join(f.header for f in fields) + "\n")
        for rec in records:
            fh.write("\t".join(_format_value(rec.get(f.name), f) for f in fields) + "\n")
    finally:
        if close:
            fh.close()


def atomic_text(records: Iterable[dict], fields: list[FieldSpec]) -> str:
    buf = io.StringIO()
    write_atomic_file(buf, records, fields)
    return buf.getvalue()


@dataclass(frozen=True)
class ReferentialReport:
    n_interactions: int
    n_users: int
    n_items: int
    dangling_users: int
    dangling_items: int


@dataclass(frozen=True)
class DatasetBundle:
    """Parsed .inter/.user/.item contents. Treat as immutable once built."""

    interactions: list[dict]
    users: dict[str, dict]
    items: dict[str, dict]
    inter_fields: list[FieldSpec] = field(default_factory=list)
    user_fields: list[FieldSpec] = field(default_factory=list)
    item_fields: list[FieldSpec] = field(default_factory=list)

    @cached_property
    def report(self) -> ReferentialReport:
        return ReferentialReport(
            n_interactions=len(self.interactions),
            n_users=len(self.users),
            n_items=len(self.items),
            dangling_users=sum(r["user_id"] not in self.users for r in self.interactions),
            dangling_items=sum(r["item_id"] not in self.items for r in self.interactions),
        )

    @cached_property
    def user_ids(self) -> np.ndarray:
        return np.array([r["user_id"] for r in self.interactions], dtype=object)

    @cached_property
    def item_ids(self) -> np.ndarray:
        return np.array([r["item_id"] for r in self.interactions], dtype=object)

    @cached_property
    def clicks(self) -> np.ndarray:
        return np.array([int(r.get("is_click") or 0) for r in self.interactions], dtype=np.int8)

    @cached_property
    def timestamps(self) -> np.ndarray:
        ts = [r.get("event_timestamp_unix") for r in self.interactions]
        if any(t is None for t in ts):
            raise InsufficientDataError("event_timestamp_unix missing on some interactions")
        return np.array(ts, dtype=np.float64)

    def local_days(self, timezone: str = DEFAULT_TIMEZONE) -> np.ndarray:
        """Calendar date of every interaction in ``timezone`` (object array of ``date``)."""
        cache = self.__dict__.setdefault("_days_cache", {})
        if timezone not in cache:
            cache[timezone] = np.array(to_local_dates(self.timestamps, timezone), dtype=object)
        return cache[timezone]

    def filter(self, mask: np.ndarray) -> "DatasetBundle":
        rows = [r for r, keep in zip(self.interactions, mask) if keep]
        return DatasetBundle(rows, self.users, self.items,
                             self.inter_fields, self.user_fields, self.item_fields)


def to_local_dates(timestamps: Iterable[float], timezone: str = DEFAULT_TIMEZONE) -> list[dt.date]:
    tz = ZoneInfo(timezone)
    out = []
    memo: dict[int, dt.date] = {}
    for ts in timestamps:
        # offsets change on whole hours, so every second within one UTC hour maps alike
        hour = int(ts // 3600)
        d = memo.get(hour)
        if d is None:
            d = memo[hour] = dt.datetime.fromtimestamp(hour * 3600, tz).date()
        out.append(d)
    return out


def find_atomic_files(directory: str | os.PathLike) -> tuple[Path, Path, Path]:
    """Locate the single ``*.inter``, ``*.user`` and ``*.item`` files in a directory."""
    directory = Path(directory)
    found = []
    for suffix in FILE_KINDS:
        matches = sorted(directory.glob(f"*.{suffix}"))
        if len(matches) != 1:
            raise FileNotFoundError(
                f"expected exactly one *.{suffix} file in {directory}, found {len(matches)}"
            )
        found.append(matches[0])
    return tuple(found)


def load_dataset_bundle(inter_path, user_path, item_path) -> DatasetBundle:
    inters, inter_fields = parse_atomic_file(inter_path, "inter")
    users, user_fields = parse_atomic_file(user_path, "user")
    items, item_fields = parse_atomic_file(item_path, "item")
    item_map: dict[str, dict] = {}
    for rec in items:
        if rec["item_id"] in item_map:
            raise SchemaError(f"duplicate item_id {rec['item_id']!r} in .item file")
        item_map[rec["item_id"]] = rec
    user_map = {rec["user_id"]: rec for rec in users}
    return DatasetBundle(inters, user_map, item_map, inter_fields, user_fields, item_fields)


def load_dataset_dir(directory) -> DatasetBundle:
    return load_dataset_bundle(*find_atomic_files(directory))


@dataclass(frozen=True)
class TemporalSplit:
    """Inclusive calendar-day ranges for train, validation and test."""

    train: tuple[dt.date, dt.date]
    valid: tuple[dt.date, dt.date]
    test: tuple[dt.date, dt.date]
    timezone: str = DEFAULT_TIMEZONE

    def label(self, day: dt.date) -> str | None:
        for name in ("train", "valid", "test"):
            lo, hi = getattr(self, name)
            if lo <= day <= hi:
                return name
        return None

    def partition(self, bundle: DatasetBundle) -> dict[str, np.ndarray]:
        """Row indices of ``bundle.interactions`` falling in each range."""
        labels = np.array([self.label(d) for d in bundle.local_days(self.timezone)], dtype=object)
        return {name: np.flatnonzero(labels == name) for name in ("train", "valid", "test")}


def make_temporal_splits(bundle: DatasetBundle, timezone: str = DEFAULT_TIMEZONE) -> TemporalSplit:
    days = bundle.local_days(timezone)
    if len(days) == 0:
        raise InsufficientDataError("no interactions")
    first, last = min(days), max(days)
    span = (last - first).days + 1
    if span < 7:
        raise InsufficientDataError(f"interactions span {span} calendar days, need at least 7")
    one = dt.timedelta(days=1)
    test = (last - 2 * one, last)
    valid = (last - 5 * one, last - 3 * one)
    train = (first, last - 6 * one)
    return TemporalSplit(train, valid, test, timezone)


@dataclass
class SynthConfig:
    """Knobs for the synthetic generator. Defaults are ~1/100 of the small golden split."""

    n_users: int = 187
    n_items: int = 208
    n_days: int = 34
    n_topics: int = 10
    click_noise: float = 0.1
    seed: int = 0
    start_date: str = "2025-03-12"
    impressions_per_day: int = 10
    topics_per_user: int = 2
    embedding_noise: float = 0.3
    # "static": every item is live every day; "daily": each day has its own disjoint catalog
    catalog: str = "static"
    click_rate: float = 0.094
    entities_per_topic: int = 6
    authors_per_topic: int = 3
    timezone: str = DEFAULT_TIMEZONE
    name: str = "synthetic"

    def validate(self) -> None:
        for attr in ("n_users", "n_items", "n_days", "n_topics", "impressions_per_day",
                     "topics_per_user", "entities_per_topic", "authors_per_topic"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.n_topics > self.n_items:
            raise ValueError("n_topics must not exceed n_items")
        if self.topics_per_user > self.n_topics:
            raise ValueError("topics_per_user must not exceed n_topics")
        if not 0.0 <= self.click_noise <= 1.0:
            raise ValueError("click_noise must lie in [0, 1]")
        if not 0.0 < self.click_rate < 1.0:
            raise ValueError("click_rate must lie in (0, 1)")
        if self.catalog not in ("static", "daily"):
            raise ValueError("catalog must be 'static' or 'daily'")
        if self.catalog == "daily" and self.n_items < self.n_days:
            raise ValueError("daily catalog needs at least one item per day")
        dt.date.fromisoformat(self.start_date)


def _r(x: float, nd: int = 6) -> float:
    return round(float(x), nd)


def _day_bounds(day: dt.date, tz: ZoneInfo) -> tuple[float, float]:
    start = dt.datetime.combine(day, dt.time(), tz).timestamp()
    end = dt.datetime.combine(day + dt.timedelta(days=1), dt.time(), tz).timestamp()
    return start, end


def synthesize(config: SynthConfig) -> dict[str, str]:
    """Generate the three atomic files as text, keyed by ``inter``/``user``/``item``.

    Users get sparse latent topic preferences, items get a topic, author,
    topic-shared wikidata entities and a content embedding near the topic
    centroid. Clicks on shown items follow the user's affinity for the item
    topic, mixed with uniform noise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tz = ZoneInfo(config.timezone)
    T = config.n_topics

    centroids = rng.standard_normal((T, EMBEDDING_DIM))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    item_topic = rng.permutation(np.arange(config.n_items) % T)
    item_ids = [f"i{j:05d}" for j in range(config.n_items)]
    items = []
    for j, topic in enumerate(item_topic):
        emb = centroids[topic] + config.embedding_noise * rng.standard_normal(EMBEDDING_DIM) / np.sqrt(EMBEDDING_DIM)
        emb /= np.linalg.norm(emb)
        n_ent = int(rng.integers(1, 4))
        ents = sorted(rng.choice(config.entities_per_topic, size=n_ent, replace=False))
        ent_ids = [f"Q{1000 + 100 * topic + e}" for e in ents]
        cats = rng.uniform(0.0, 0.3, N_CATEGORIES)
        cats[topic % N_CATEGORIES] = rng.uniform(0.6, 0.95)
        author = f"author_{topic}_{int(rng.integers(config.authors_per_topic))}"
        text_len = int(rng.integers(800, 6000))
        items.append({
            "item_id": item_ids[j],
            "title": f"Article {j} on topic {topic}",
            "lead": f"Lead of article {j}",
            "text": f"Body of article {j} about topic {topic}",
            "text_length": float(text_len),
            "author": author,
            "images": [f"img_{j}_0.jpg"],
            "wikidata_entities_words": [f"entity_{q}" for q in ent_ids],
            "wikidata_entities_ids": ent_ids,
            "wikidata_entities_scores": [_r(s) for s in rng.uniform(0.3, 1.0, n_ent)],
            "wikidata_topics": [f"topic_{topic}"],
            "wikidata_topics_scores": [_r(rng.uniform(0.5, 1.0))],
            "content_publication_premium": float(rng.random() < 0.1),
            "openai_embedding": [_r(v) for v in emb],
            "bert_category_scores": [_r(v, 4) for v in cats],
            "stylometrix_title": [_r(v, 4) for v in rng.random(4)],
            "stylometrix_lead": [_r(v, 4) for v in rng.random(4)],
            "stylometrix_text": [_r(v, 4) for v in rng.random(4)],
        })

    users = []
    prefs = np.zeros((config.n_users, T))
    devices = []
    for u in range(config.n_users):
        fav = rng.choice(T, size=config.topics_per_user, replace=False)
        prefs[u, fav] = rng.dirichlet(np.ones(config.topics_per_user))
        cat = np.zeros(N_CATEGORIES)
        np.add.at(cat, np.arange(T) % N_CATEGORIES, prefs[u])
        cat = [_r(v) for v in cat]
        cat[-1] = _r(1.0 - sum(cat[:-1]), 9)
        device = "mobile" if rng.random() < 0.6 else "desktop"
        devices.append(device)
        users.append({
            "user_id": f"u{u:05d}",
            "category_preferences": cat,
            "user_sso_name": "logged_in" if rng.random() < 0.3 else "anonymous",
            "browser": str(rng.choice(["chrome", "firefox", "safari", "edge"])),
            "device": device,
        })

    if config.catalog == "daily":
        order = np.argsort(item_topic, kind="stable")
        day_of_item = np.empty(config.n_items, dtype=int)
        day_of_item[order] = np.arange(config.n_items) % config.n_days
        catalogs = [np.flatnonzero(day_of_item == d) for d in range(config.n_days)]
    else:
        catalogs = [np.arange(config.n_items)] * config.n_days

    scale = config.click_rate * T
    start = dt.date.fromisoformat(config.start_date)
    inters = []
    for d in range(config.n_days):
        day = start + dt.timedelta(days=d)
        lo, hi = _day_bounds(day, tz)
        live = catalogs[d]
        n_show = min(config.impressions_per_day, len(live))
        business = float(day.weekday() < 5)
        for u in range(config.n_users):
            shown = rng.choice(live, size=n_show, replace=False)
            times = np.sort(rng.uniform(lo, hi - 1, n_show))
            for j, ts in zip(shown, times):
                ts = float(int(ts))
                affinity = min(1.0, scale * prefs[u, item_topic[j]])
                p = (1.0 - config.click_noise) * affinity + config.click_noise * config.click_rate
                click = float(rng.random() < p)
                local = dt.datetime.fromtimestamp(ts, tz)
                pv = float(rng.integers(1, 30))
                inters.append({
                    "user_id": users[u]["user_id"],
                    "item_id": item_ids[j],
                    "is_click": click,
                    "event_timestamp_unix": ts,
                    "event_date": local.date().isoformat(),
                    "weekday": float(local.weekday()),
                    "hour": float(local.hour),
                    "is_business_day": business,
                    "ip_cnt": pv,
                    "pu_ip_cnt": float(rng.integers(0, 5)),
                    "pv_cnt": pv + float(rng.integers(0, 10)),
                    "glowna_ip_cnt": float(rng.integers(0, 10)),
                    "pv_on_content_publication_premium_cnt": float(rng.integers(0, 3)),
                    "ses_duration_sum": _r(rng.exponential(300.0), 1),
                    "device_type": devices[u],
                    "context_client_brand": "generic",
                    "context_client_version": "1.0",
                    "cs": "1920x1080" if devices[u] == "desktop" else "390x844",
                    "rh_user_agent": "Mozilla/5.0 (synthetic)",
                    "latitude": _r(52.23 + rng.normal(0, 1), 4),
                    "longitude": _r(21.01 + rng.normal(0, 1), 4),
                    "accuracy_radius": float(rng.integers(5, 200)),
                    "geoip_city_name": "Warszawa",
                    "geoip_region_name": "Mazowieckie",
                    "is_active_click": click,
                    "is_active_pageview": 1.0,
                    "user_evoked_sso_logged_in": float(users[u]["user_sso_name"] == "logged_in"),
                    "user_subscriber": 0.0,
                    "lts_pred": _r(rng.random(), 4),
                })
    inters.sort(key=lambda r: (r["event_timestamp_unix"], r["user_id"], r["item_id"]))

    return {
        "inter": atomic_text(inters, field_specs(INTER_FIELDS)),
        "user": atomic_text(users, field_specs(USER_FIELDS)),
        "item": atomic_text(items, field_specs(ITEM_FIELDS)),
    }


def generate_synthetic_dataset(config: SynthConfig, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write ``<name>.inter``, ``<name>.user`` and ``<name>.item`` into ``out_dir``."""
    texts = synthesize(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind, text in texts.items():
        path = out / f"{config.name}.{kind}"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        paths[kind] = path
    return paths
