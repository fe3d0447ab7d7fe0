"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""
import datetime as dt
import functools
import inspect
import math
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from oracles import (
    encoder_gradient_error, hop_soundness_errors, model_gradient_error, random_kg, ranking_metrics,
)
from ripplerec.archive import ArchiveCorruptError, ArchiveError, load_archive, read_manifest, save_archive
from ripplerec.coldstart import evaluate_bridge, item_contents
from ripplerec.config import config_from_mapping
from ripplerec.dataset import SynthConfig, generate_synthetic_dataset, load_dataset_dir, make_temporal_splits
from ripplerec.evaluation import build_slice_report, evaluate_slice, impression_slates
from ripplerec.kg import KnowledgeGraph, RELATIONS, build_ripple_profile, item_entity_name
from ripplerec.metrics import ndcg_at_k, precision_recall_at_k, rank_order
from ripplerec.model import ModelConfig, ModelParameters, make_examples, score_candidate, train
from ripplerec.pipeline import STAGES, deploy_archive, run_pipeline
from ripplerec.serving import recommend
from ripplerec.workflow import fit, rows_on_days

ROOT = Path(__file__).resolve().parents[1]
# learning rate and batch size used wherever a model must actually learn on synthetic data
LEARNING = dict(learning_rate=0.5, batch_size=32)


def criterion(number, title):
    """Run a check returning (passed, detail); record the verdict and fail the test when it fails."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, record_criterion, **kwargs):
            start = time.perf_counter()
            try:
                passed, detail = fn(*args, **kwargs)
            except Exception as exc:
                record_criterion(number, title, False, f"error: {type(exc).__name__}: {exc}")
                raise
            detail = f"{detail}; {time.perf_counter() - start:.1f}s"
            record_criterion(number, title, passed, detail)
            assert passed, detail
        # expose the recording fixture to pytest alongside the check's own fixtures
        sig = inspect.signature(fn)
        params = list(sig.parameters.values())
        params.append(inspect.Parameter("record_criterion", inspect.Parameter.KEYWORD_ONLY))
        run.__signature__ = sig.replace(parameters=params)
        return run
    return wrap


@criterion(1, "metric oracle equivalence")
def test_metric_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, checks = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        # ties in scores exercise the item-id tie-break
        scores = rng.integers(0, 5, n).astype(float)
        items = [f"i{j:02d}" for j in rng.permutation(n)]
        order = rank_order(items, scores)
        expected_order = sorted(range(n), key=lambda j: (-scores[j], items[j]))
        assert order == expected_order
        ranked = [int(labels[j]) for j in order]
        pos = int(labels.sum())
        for k in (1, 3, 10):
            ref = ranking_metrics(ranked, pos, k)
            got = (ndcg_at_k(ranked, pos, k), *precision_recall_at_k(ranked, pos, k))
            worst = max(worst, *(abs(a - b) for a, b in zip(got, ref)))
            checks += 1
    elapsed = time.perf_counter() - start
    return worst < 1e-9 and elapsed < 10, f"{checks} comparisons, max |delta| {worst:.1e}, {elapsed:.2f}s < 10s"


@criterion(2, "gradient correctness")
def test_gradient_correctness():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    weights = [(0.0, 0.0), (0.3, 0.0), (0.0, 0.1), (0.3, 0.1)]
    model = [model_gradient_error(rng, *weights[i % 4]) for i in range(120)]
    encoder = [encoder_gradient_error(rng) for _ in range(120)]
    elapsed = time.perf_counter() - start
    passed = max(model) < 1e-4 and max(encoder) < 1e-4 and elapsed < 30
    return passed, (f"model max rel err {max(model):.1e} over {len(model)}, encoder {max(encoder):.1e} "
                    f"over {len(encoder)}, {elapsed:.1f}s < 30s")


@criterion(3, "published configuration replication")
def test_published_configuration(small_bundle):
    cfg = ModelConfig()
    published = (cfg.n_hop, cfg.n_memory, cfg.learning_rate, cfg.max_epochs, cfg.patience)
    splits = make_temporal_splits(small_bundle)
    part = splits.partition(small_bundle)
    art, res = fit(small_bundle, part["train"], part["valid"], cfg)
    ran = (art.profiles.n_hop, art.profiles.n_memory) == (5, 16)
    ran &= res.log[0]["epoch"] == 0 and res.log[0]["valid_ndcg"] is not None
    ran &= res.stopped_epoch == min(cfg.max_epochs, res.best_epoch + cfg.patience)

    kg = art.kg
    profiles = art.profiles
    pairs = [(small_bundle.interactions[i]["user_id"], small_bundle.interactions[i]["item_id"],
              int(small_bundle.clicks[i])) for i in part["train"]]
    examples = make_examples(pairs, kg, profiles)
    stops = []
    for improve_until in (0, 2, 7):
        calls = []

        def stagnant(params):
            calls.append(1)
            return 0.1 * min(len(calls) - 1, improve_until)

        r = train(kg, profiles, examples, cfg, stagnant)
        stops.append((r.best_epoch, r.stopped_epoch))
    stub_ok = all(stop == best + cfg.patience for best, stop in stops)
    passed = published == (5, 16, 0.01, 50, 5) and ran and stub_ok
    return passed, (f"config {published}, real run best {res.best_epoch} stopped {res.stopped_epoch}, "
                    f"stub (best, stop) {stops}")


def _random_ranker_ndcg(rows, k=10):
    """Expected NDCG@k of a uniformly random ordering, averaged over users with a click."""
    slates, labels = impression_slates(rows)
    values = []
    for user, items in slates.items():
        lab = [labels[(user, i)] for i in items]
        n, pos = len(lab), sum(lab)
        if pos == 0:
            continue
        discount = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, n) + 1))
        ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, pos) + 1))
        values.append(pos / n * discount / ideal)
    return float(np.mean(values))


@criterion(4, "learning signal over a random ranker")
def test_learning_signal(tmp_path):
    start = time.perf_counter()
    ratios, improved = [], []
    for seed in range(3):
        out = tmp_path / f"s{seed}"
        generate_synthetic_dataset(SynthConfig(n_users=200, n_items=100, n_days=7, n_topics=5, seed=seed), out)
        bundle = load_dataset_dir(out)
        part = make_temporal_splits(bundle).partition(bundle)
        cfg = ModelConfig(n_hop=2, n_memory=16, max_epochs=20, seed=seed, **LEARNING)
        art, res = fit(bundle, part["train"], part["valid"], cfg)
        rows = [bundle.interactions[i] for i in part["test"]]
        ratios.append(evaluate_slice(art, rows).ndcg / _random_ranker_ndcg(rows))
        improved.append(res.best_metric > res.log[0]["valid_ndcg"])
    elapsed = time.perf_counter() - start
    median = float(np.median(ratios))
    passed = median >= 1.5 and elapsed < 120
    return passed, (f"test NDCG@10 / random = {', '.join(f'{r:.2f}' for r in ratios)}, median {median:.2f} "
                    f">= 1.5, validation beat epoch 0 in {sum(improved)}/3 seeds, {elapsed:.0f}s < 120s")


@criterion(5, "cold-start duplicate fidelity")
def test_duplicate_fidelity(small_bundle):
    start = dt.date(2025, 3, 12)
    rows = rows_on_days(small_bundle, start, start + dt.timedelta(days=1))
    art, _ = fit(small_bundle, rows, config=ModelConfig(n_hop=2, n_memory=8, max_epochs=2, **LEARNING))
    content = item_contents(small_bundle.items)
    known = art.index.item_ids
    rng = np.random.default_rng(5)
    users = art.profiles.user_ids
    mismatches = 0
    for case in range(100):
        source = known[int(rng.integers(len(known)))]
        twin = f"dup{case:03d}"
        table = dict(content, **{twin: content[source].copy()})
        resolver = art.resolver(table, "similarity")
        res = resolver.resolve(twin)
        profile = art.profiles.get(users[int(rng.integers(len(users)))])
        bridged = score_candidate(art.params, profile, vector=res.vector)
        direct = score_candidate(art.params, profile, art.kg.item_entity(source))
        if res.matched_id != source or bridged.score != direct.score or bridged.logit != direct.logit:
            mismatches += 1
    return mismatches == 0, f"{100 - mismatches}/100 duplicates scored bit-identically to their known twin"


def _clustered_world(rng, n_clusters=20, per_cluster=50, content_dim=256, model_dim=16):
    """Items in clusters, both in content space and in model space, within-cluster cosine >= 0.9."""
    def members(center, spread, n):
        pts = center + spread * rng.normal(size=(n, len(center))) / math.sqrt(len(center))
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)

    names, content, model, cluster = [], {}, [], []
    for c in range(n_clusters):
        cc = rng.normal(size=content_dim)
        cm = rng.normal(size=model_dim)
        cc, cm = cc / np.linalg.norm(cc), cm / np.linalg.norm(cm)
        cvec = members(cc, 0.2, per_cluster)
        mvec = members(cm, 0.1, per_cluster)
        for j in range(per_cluster):
            item = f"c{c:02d}_{j:02d}"
            names.append(item)
            content[item] = cvec[j]
            model.append(mvec[j])
            cluster.append(c)
    kg = KnowledgeGraph(tuple(item_entity_name(i) for i in names), RELATIONS, np.empty((0, 3), np.int64))
    params = ModelParameters(np.array(model, dtype=np.float32), np.zeros((len(RELATIONS), model_dim, model_dim),
                                                                         dtype=np.float32))
    return kg, params, content, dict(zip(names, cluster))


def _min_within_cosine(vectors, clusters):
    V = np.array(vectors, dtype=np.float64)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    labels = np.array(clusters)
    worst = 1.0
    for c in np.unique(labels):
        block = V[labels == c]
        worst = min(worst, float((block @ block.T).min()))
    return worst


@criterion(6, "similarity-match quality on clustered embeddings")
def test_similarity_match_quality():
    rng = np.random.default_rng(11)
    kg, params, content, cluster = _clustered_world(rng)
    items = list(cluster)
    labels = [cluster[i] for i in items]
    within_content = _min_within_cosine([content[i] for i in items], labels)
    within_model = _min_within_cosine(params.entity_emb, labels)
    assert within_content >= 0.9 and within_model >= 0.9
    report = evaluate_bridge(params, kg, content, "similarity", holdout_fraction=0.1, seed=3)
    same = np.mean([cluster[h] == cluster[m] for h, m in zip(report.item_ids, report.matched_ids)])
    passed = same >= 0.99 and report.median >= 0.9
    return passed, (f"{len(report.item_ids)} held out, within-cluster matches {same:.1%} >= 99%, "
                    f"median matched cosine {report.median:.3f} >= 0.9 (clusters: content min "
                    f"{within_content:.3f}, model min {within_model:.3f})")


@criterion(7, "temporal degradation after catalog turnover")
def test_temporal_degradation(tmp_path):
    diffs, pairs = [], []
    train_date = "2025-03-15"
    for seed in range(3):
        root = tmp_path / f"s{seed}"
        generate_synthetic_dataset(SynthConfig(n_users=200, n_items=140, n_days=7, n_topics=5, seed=seed,
                                               catalog="daily"), root / "data")
        cfg = config_from_mapping({
            "data": {"dir": "data"},
            "pipeline": {"train_date": train_date, "train_window_days": 1, "work_dir": "work",
                         "serving_dir": "serving"},
            "model": {"n_hop": 2, "n_memory": 16, "max_epochs": 20, **LEARNING},
            "coldstart": {"strategy": "similarity"},
            "seed": seed,
        }, root)
        result = run_pipeline(cfg, until="archive")
        art = load_archive(result.archive_path)
        bundle = load_dataset_dir(root / "data")
        cmp = build_slice_report(art, bundle, train_date, content=item_contents(bundle.items),
                                 strategy="similarity")
        same, after = cmp.reports["train_day"].ndcg, cmp.reports["train_plus_1"].ndcg
        pairs.append((same, after))
        diffs.append(same - after)
    median = float(np.median(diffs))
    detail = ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs)
    return median >= 0, f"train-day vs day+1 NDCG@10: {detail}; median difference {median:.3f} >= 0"


@criterion(8, "ripple-set soundness on random graphs")
def test_ripple_soundness():
    rng = np.random.default_rng(8)
    failures, checked_hops = [], 0
    for g in range(100):
        kg = random_kg(rng, int(rng.integers(4, 30)), int(rng.integers(2, 60)))
        items = kg.item_ids()
        n_hop, n_memory = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        for _ in range(3):
            history = list(rng.choice(items, size=int(rng.integers(0, len(items) + 1)), replace=False))
            p = build_ripple_profile(history, kg, n_hop, n_memory, int(rng.integers(1 << 30)))
            errors = hop_soundness_errors(p, kg, history)
            for k in range(p.depth):
                checked_hops += 1
                if (p.heads[k] < 0).any() or len(p.heads[k]) != n_memory:
                    errors.append(f"hop {k} not full")
            failures.extend(f"graph {g}: {e}" for e in errors)
    return not failures, f"300 profiles on 100 graphs, {checked_hops} non-empty hops full; " + \
        (failures[0] if failures else "no violations")


def _cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "ripplerec", *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise RuntimeError(f"ripplerec {' '.join(map(str, args))} failed: {proc.stderr}")
    return proc


def _pipeline_config(root: Path, data: Path, name: str) -> Path:
    doc = yaml.safe_load((ROOT / "configs" / "pipeline_small.yaml").read_text())
    doc["data"]["dir"] = str(data)
    doc["pipeline"]["work_dir"] = str(root / f"work-{name}")
    doc["pipeline"]["serving_dir"] = str(root / "serving")
    path = root / f"{name}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


@criterion(9, "pipeline end to end")
def test_pipeline_end_to_end(tmp_path):
    data = tmp_path / "data"
    _cli("data", "synth", "--config", ROOT / "configs" / "synth_small.yaml", "--out", data)
    clean = _pipeline_config(tmp_path, data, "clean")
    start = time.perf_counter()
    _cli("pipeline", "run", "--config", clean)
    elapsed = time.perf_counter() - start
    serving = tmp_path / "serving"
    markers = sorted(p.stem for p in (tmp_path / "work-clean" / "markers").glob("*.done"))
    digest = read_manifest(serving / "current")["content_hash"]
    link_ok = os.path.islink(serving / "current") and os.readlink(serving / "current").endswith(digest)
    stray = [p.name for p in serving.iterdir() if p.name not in ("current", ".archives")]

    proc = _cli("recommend", "--archive", serving, "--user", "u00001", "--n", "5")
    rec_lines = proc.stdout.splitlines()
    served = rec_lines[0] == "rank\titem_id\tscore\tprovenance" and len(rec_lines) == 6

    # readers of serving/current never observe a missing or partial archive during redeploys
    failures, stop = [], threading.Event()

    def reader():
        while not stop.is_set():
            try:
                load_archive(serving / "current")
            except Exception as exc:  # noqa: BLE001
                failures.append(exc)

    clean_archive = tmp_path / "work-clean" / "archive"
    copy = tmp_path / "archive-copy"
    shutil.copytree(clean_archive, copy)
    t = threading.Thread(target=reader)
    t.start()
    for k in range(10):
        deploy_archive(copy if k % 2 == 0 else clean_archive, serving, f"alt{k}" if k % 2 == 0 else digest)
    stop.set()
    t.join()

    killed = _pipeline_config(tmp_path, data, "killed")
    marker = tmp_path / "work-killed" / "markers" / "train.done"
    p = subprocess.Popen([sys.executable, "-m", "ripplerec", "pipeline", "run", "--config", str(killed)],
                         stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    deadline = time.time() + 120
    while not marker.exists() and p.poll() is None and time.time() < deadline:
        time.sleep(0.01)
    p.send_signal(signal.SIGKILL)
    was_killed = p.wait() == -signal.SIGKILL
    _cli("pipeline", "run", "--config", killed)
    resumed = read_manifest(serving / "current")["content_hash"]

    passed = (markers == sorted(STAGES) and elapsed < 300 and link_ok and not stray and served
              and not failures and was_killed and resumed == digest)
    return passed, (f"{len(markers)}/6 stages in {elapsed:.1f}s < 300s, symlink deploy {link_ok}, "
                    f"recommend rows {len(rec_lines) - 1}, reader failures {len(failures)}, "
                    f"killed mid-run {was_killed}, resumed hash matches {resumed == digest}")


@criterion(10, "archive persistence fidelity")
def test_persistence_fidelity(tmp_path, small_bundle):
    start = dt.date(2025, 3, 12)
    rows = rows_on_days(small_bundle, start, start + dt.timedelta(days=1))
    art, _ = fit(small_bundle, rows, config=ModelConfig(n_hop=2, n_memory=8, max_epochs=2, **LEARNING))
    save_archive(art, tmp_path / "a")
    loaded = load_archive(tmp_path / "a")
    rng = np.random.default_rng(10)
    users = art.profiles.user_ids
    differing = 0
    for _ in range(100):
        u = users[int(rng.integers(len(users)))]
        e = int(rng.integers(art.kg.n_entities))
        a = score_candidate(art.params, art.profiles.get(u), e)
        b = score_candidate(loaded.params, loaded.profiles.get(u), e)
        differing += a.score != b.score or a.logit != b.logit
    recs_equal = recommend(art, users[0], n=10) == recommend(loaded, users[0], n=10)

    undetected, flips = [], 0
    for f in sorted((tmp_path / "a").iterdir()):
        original = f.read_bytes()
        positions = {0, len(original) - 1, *rng.integers(0, len(original), 20).tolist()}
        for pos in sorted(positions):
            blob = bytearray(original)
            blob[pos] ^= 1 << int(rng.integers(8))
            f.write_bytes(bytes(blob))
            flips += 1
            try:
                load_archive(tmp_path / "a")
                undetected.append(f"{f.name}@{pos}")
            except ArchiveError:
                pass
        f.write_bytes(original)
    blob = bytearray((tmp_path / "a" / "E.bin").read_bytes())
    blob[len(blob) // 2] ^= 1
    (tmp_path / "a" / "E.bin").write_bytes(bytes(blob))
    with pytest.raises(ArchiveCorruptError, match="E.bin"):
        load_archive(tmp_path / "a")
    passed = differing == 0 and recs_equal and not undetected
    return passed, (f"100 queries, {differing} differ after reload; {flips - len(undetected)}/{flips} "
                    f"single-byte flips detected" + (f", missed {undetected[:3]}" if undetected else ""))
