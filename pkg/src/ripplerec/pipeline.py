"""Local retraining pipeline with resumable stages and atomic deployment.

Stage graph (``train`` and ``profiles`` run concurrently)::

    check-data -> extract-kg -> train    \\
                             -> profiles -> archive -> deploy

Each stage writes its outputs under ``work_dir`` and then a marker file. A
rerun skips stages whose marker exists unless an upstream stage ran again.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive as archive_mod
from .artifacts import ModelArtifacts, popularity_counts
from .coldstart import BridgeError, build_similarity_index, item_contents, train_encoder
from .config import PipelineConfig
from .dataset import DatasetBundle, DatasetError, find_atomic_files, load_dataset_bundle
from .evaluation import make_ndcg_evaluator
from .kg import ProfileStore, build_all_profiles, click_histories, extract_knowledge_graph, read_kg, write_kg
from .model import ModelParameters, make_examples, train
from .workflow import recent_items

logger = logging.getLogger(__name__)

STAGES = ("check-data", "extract-kg", "train", "profiles", "archive", "deploy")
DEPENDS = {
    "check-data": (),
    "extract-kg": ("check-data",),
    "train": ("extract-kg",),
    "profiles": ("extract-kg",),
    "archive": ("train", "profiles"),
    "deploy": ("archive",),
}
CURRENT = "current"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class StopPipeline(Exception):
    """Raised by ``stop_after`` to emulate an interruption between stages."""


@dataclass
class PipelineResult:
    archive_path: Path | None
    content_hash: str | None
    log: list[dict] = field(default_factory=list)

    def ran(self) -> list[str]:
        return [e["stage"] for e in self.log if e["status"] == "ran"]

    def skipped(self) -> list[str]:
        return [e["stage"] for e in self.log if e["status"] == "skipped"]


def data_paths(cfg: PipelineConfig) -> tuple[Path, Path, Path]:
    if cfg.inter_path and cfg.user_path and cfg.item_path:
        return Path(cfg.inter_path), Path(cfg.user_path), Path(cfg.item_path)
    return find_atomic_files(cfg.data_dir)


def _row_key(seed: int, rec: dict) -> float:
    raw = f"{seed}\x00{rec['user_id']}\x00{rec['item_id']}\x00{rec.get('event_timestamp_unix')}".encode()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little") / 2.0**64


def training_rows(bundle: DatasetBundle, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the training window ending on ``train_date``, split into fit and held-out validation.

    Validation rows are a deterministic pseudo-random ``valid_fraction`` of the
    window's impressions; they do not seed ripple sets.
    """
    last = dt.date.fromisoformat(cfg.train_date)
    first = last - dt.timedelta(days=cfg.train_window_days - 1)
    days = bundle.local_days(cfg.timezone)
    fit, valid = [], []
    for i, (day, rec) in enumerate(zip(days, bundle.interactions)):
        if not first <= day <= last:
            continue
        if cfg.device_filter and rec.get("device_type") != cfg.device_filter:
            continue
        (valid if _row_key(cfg.seed, rec) < cfg.valid_fraction else fit).append(i)
    return np.array(fit, dtype=np.int64), np.array(valid, dtype=np.int64)


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        cfg.validate()
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self.markers = self.work / "markers"
        self._bundle: DatasetBundle | None = None

    # -- bookkeeping --------------------------------------------------------
    def marker(self, stage: str) -> Path:
        return self.markers / f"{stage}.done"

    def done(self, stage: str) -> bool:
        if not self.marker(stage).exists():
            return False
        if stage == "deploy":
            # the marker only counts while the serving dir still serves this archive
            try:
                info = json.loads(self.marker(stage).read_text())
                live = archive_mod.read_manifest(Path(self.cfg.serving_dir) / CURRENT)["content_hash"]
            except (OSError, ValueError, archive_mod.ArchiveError):
                return False
            return info.get("content_hash") == live
        return True

    def _mark(self, stage: str, info: dict) -> None:
        self.markers.mkdir(parents=True, exist_ok=True)
        tmp = self.marker(stage).with_suffix(".tmp")
        tmp.write_text(json.dumps(info, sort_keys=True) + "\n")
        os.replace(tmp, self.marker(stage))

    def _publish_dir(self, tmp: Path, final: Path) -> None:
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)

    def _tmpdir(self, name: str) -> Path:
        self.work.mkdir(parents=True, exist_ok=True)
        return Path(tempfile.mkdtemp(prefix=f".{name}-", dir=self.work))

    @property
    def bundle(self) -> DatasetBundle:
        if self._bundle is None:
            self._bundle = load_dataset_bundle(*data_paths(self.cfg))
        return self._bundle

    def _index_items(self) -> set[str] | None:
        """Items the similarity index may match, or None for every known item."""
        if self.cfg.index_window_days is None:
            return None
        fit, _ = training_rows(self.bundle, self.cfg)
        return recent_items(self.bundle, fit, dt.date.fromisoformat(self.cfg.train_date),
                            self.cfg.index_window_days, self.cfg.timezone)

    # -- stages -------------------------------------------------------------
    def check_data(self) -> dict:
        try:
            paths = data_paths(self.cfg)
        except FileNotFoundError as err:
            raise PipelineError("check-data", str(err)) from None
        for p in paths:
            if not p.exists():
                raise PipelineError("check-data", f"missing data file {p}")
        try:
            bundle = self.bundle
        except (DatasetError, OSError) as err:
            raise PipelineError("check-data", f"unreadable data: {err}") from None
        day = dt.date.fromisoformat(self.cfg.train_date)
        days = bundle.local_days(self.cfg.timezone)
        if not np.any(days == day):
            raise PipelineError("check-data", f"no interactions on train_date {self.cfg.train_date}")
        fit, valid = training_rows(bundle, self.cfg)
        if len(fit) == 0:
            raise PipelineError("check-data", "training window is empty after filtering")
        return {"files": [str(p) for p in paths], "fit_rows": len(fit), "valid_rows": len(valid)}

    def extract_kg(self) -> dict:
        fit, _ = training_rows(self.bundle, self.cfg)
        items = {self.bundle.interactions[i]["item_id"] for i in fit}
        kg = extract_knowledge_graph(self.bundle.items, self.cfg.extraction, items)
        tmp = self._tmpdir("kg")
        write_kg(kg, tmp)
        self._publish_dir(tmp, self.work / "kg")
        return {"entities": kg.n_entities, "triples": len(kg.triples),
                "isolated_items": kg.report.isolated_items}

    def _profiles(self, kg) -> ProfileStore:
        fit, _ = training_rows(self.bundle, self.cfg)
        histories = click_histories(self.bundle, fit, self.cfg.max_history)
        m = self.cfg.model
        return build_all_profiles(histories, kg, m.n_hop, m.n_memory, self.cfg.seed, self.cfg.n_workers)

    def train(self) -> dict:
        kg = read_kg(self.work / "kg")
        profiles = self._profiles(kg)
        fit, valid = training_rows(self.bundle, self.cfg)
        b = self.bundle
        pairs = [(b.interactions[i]["user_id"], b.interactions[i]["item_id"], int(b.clicks[i])) for i in fit]
        examples = make_examples(pairs, kg, profiles)
        if len(examples) == 0:
            raise PipelineError("train", "no usable training examples")
        evaluator = None
        if len(valid):
            content = item_contents(b.items)
            try:
                index = build_similarity_index(kg, content, self._index_items())
                strategy = self.cfg.strategy
            except BridgeError:
                index, strategy = None, "known_only"
            evaluator = make_ndcg_evaluator(kg, profiles, [b.interactions[i] for i in valid], self.cfg.model,
                                            popularity_counts(b, fit), index, content, strategy)
        result = train(kg, profiles, examples, self.cfg.model, evaluator)
        tmp = self._tmpdir("model")
        (tmp / "E.bin").write_bytes(archive_mod.encode_blob({"E": result.params.entity_emb}))
        (tmp / "R.bin").write_bytes(archive_mod.encode_blob({"R": result.params.relation_mat}))
        (tmp / "train_log.json").write_text(json.dumps(result.log, indent=1) + "\n")
        self._publish_dir(tmp, self.work / "model")
        return {"examples": len(examples), "best_epoch": result.best_epoch,
                "stopped_epoch": result.stopped_epoch, "best_ndcg": result.best_metric}

    def profiles(self) -> dict:
        kg = read_kg(self.work / "kg")
        store = self._profiles(kg)
        tmp = self._tmpdir("profiles")
        (tmp / "profiles.bin").write_bytes(archive_mod.encode_blob({
            "user_ids": archive_mod._strings(store.user_ids), "heads": store.heads,
            "relations": store.relations, "tails": store.tails, "depth": store.depth,
            "unknown_items": store.unknown_items}))
        self._publish_dir(tmp, self.work / "profiles")
        return {"users": len(store), "empty": int((store.depth == 0).sum())}

    def archive(self) -> dict:
        kg = read_kg(self.work / "kg")
        E = archive_mod.decode_blob((self.work / "model" / "E.bin").read_bytes())["E"]
        R = archive_mod.decode_blob((self.work / "model" / "R.bin").read_bytes())["R"]
        p = archive_mod.decode_blob((self.work / "profiles" / "profiles.bin").read_bytes())
        store = ProfileStore(archive_mod._unstrings(p["user_ids"]), p["heads"], p["relations"],
                             p["tails"], p["depth"], p["unknown_items"])
        params = ModelParameters(E, R)
        fit, _ = training_rows(self.bundle, self.cfg)
        content = item_contents(self.bundle.items)
        try:
            index = build_similarity_index(kg, content, self._index_items())
        except BridgeError:
            index = None
        encoder = None
        if self.cfg.train_encoder and index is not None:
            X = index.vectors
            Y = E[index.entity_ids].astype(np.float64)
            encoder = train_encoder(X, Y, self.cfg.encoder).params
        art = ModelArtifacts(self.cfg.model, params, kg, store, popularity_counts(self.bundle, fit),
                             index, encoder, self.cfg.strategy, self.cfg.train_date)
        tmp = self._tmpdir("archive")
        digest = archive_mod.save_archive(art, tmp, extra=self.cfg.snapshot())
        self._publish_dir(tmp, self.work / "archive")
        return {"content_hash": digest}

    def deploy(self) -> dict:
        src = self.work / "archive"
        manifest = archive_mod.read_manifest(src)
        digest = manifest["content_hash"]
        archive_mod.load_archive(src)  # refuse to deploy anything unreadable
        return {"content_hash": digest, "path": str(deploy_archive(src, self.cfg.serving_dir, digest))}

    # -- driver -------------------------------------------------------------
    def run(self, stop_after: str | None = None, until: str | None = None) -> PipelineResult:
        """Run all needed stages. ``until`` ends normally after that stage's group;
        ``stop_after`` raises ``StopPipeline`` there instead."""
        for stale in self.work.glob(".*-*"):
            if stale.is_dir():
                shutil.rmtree(stale, ignore_errors=True)
        runners = {"check-data": self.check_data, "extract-kg": self.extract_kg, "train": self.train,
                   "profiles": self.profiles, "archive": self.archive, "deploy": self.deploy}
        ran: set[str] = set()
        log: list[dict] = []

        def needed(stage):
            return not self.done(stage) or any(dep in ran for dep in DEPENDS[stage])

        def execute(stage):
            start = time.perf_counter()
            try:
                info = runners[stage]()
            except PipelineError:
                raise
            except Exception as err:
                raise PipelineError(stage, f"{type(err).__name__}: {err}") from err
            self._mark(stage, info)
            logger.info("stage %s done in %.2fs", stage, time.perf_counter() - start)
            return {"stage": stage, "status": "ran", "seconds": time.perf_counter() - start, "info": info}

        groups = [("check-data",), ("extract-kg",), ("train", "profiles"), ("archive",), ("deploy",)]
        for group in groups:
            todo = [s for s in group if needed(s)]
            for s in group:
                if s not in todo:
                    log.append({"stage": s, "status": "skipped"})
            if len(todo) == 2:
                # materialize the shared data once before fanning out
                _ = self.bundle
                with ThreadPoolExecutor(2) as pool:
                    entries = list(pool.map(execute, todo))
            else:
                entries = [execute(s) for s in todo]
            for e in entries:
                ran.add(e["stage"])
                log.append(e)
            if stop_after is not None and stop_after in group:
                raise StopPipeline(stop_after)
            if until is not None and until in group:
                break
        order = {s: i for i, s in enumerate(STAGES)}
        log.sort(key=lambda e: order[e["stage"]])
        if until is not None and until != "deploy":
            local = self.work / "archive"
            digest = archive_mod.read_manifest(local)["content_hash"] if local.exists() else None
            return PipelineResult(local if local.exists() else None, digest, log)
        serving = Path(self.cfg.serving_dir) / CURRENT
        manifest = archive_mod.read_manifest(serving)
        return PipelineResult(serving.resolve(), manifest["content_hash"], log)


def deploy_archive(src: str | os.PathLike, serving_dir: str | os.PathLike, digest: str) -> Path:
    """Copy an archive into ``serving_dir`` and atomically repoint ``serving_dir/current`` at it.

    Readers resolving ``current`` see either the previous complete archive or
    the new complete one. Archives older than the previous one are pruned.
    """
    serving = Path(serving_dir)
    store = serving / ".archives"
    store.mkdir(parents=True, exist_ok=True)
    final = store / digest
    if not final.exists():
        tmp = Path(tempfile.mkdtemp(prefix=".incoming-", dir=store))
        for f in sorted(Path(src).iterdir()):
            shutil.copy2(f, tmp / f.name)
        os.replace(tmp, final)
    link = serving / CURRENT
    previous = os.path.basename(os.readlink(link)) if link.is_symlink() else None
    link_tmp = serving / f".{CURRENT}.{os.getpid()}"
    if link_tmp.is_symlink() or link_tmp.exists():
        link_tmp.unlink()
    os.symlink(os.path.join(".archives", digest), link_tmp)
    os.replace(link_tmp, link)
    # the previous archive stays for readers that resolved the old link
    for old in store.iterdir():
        if old.name not in (digest, previous):
            shutil.rmtree(old, ignore_errors=True)
    return link


def run_pipeline(cfg: PipelineConfig, stop_after: str | None = None,
                 until: str | None = None) -> PipelineResult:
    return Pipeline(cfg).run(stop_after, until)
