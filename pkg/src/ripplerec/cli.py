"""Command line entry point: ``ripplerec <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive as archive_mod
from .coldstart import build_similarity_index, evaluate_bridge, item_contents, write_bridge_report
from .config import load_config, load_synth_config
from .dataset import DatasetError, generate_synthetic_dataset, load_dataset_bundle, load_dataset_dir
from .evaluation import build_slice_report, read_baseline_scores
from .kg import ExtractionConfig, build_all_profiles, click_histories, extract_knowledge_graph, read_kg, write_kg
from .pipeline import PipelineError, run_pipeline
from .serving import format_recommendations, open_archive, recommend
from .workflow import rows_on_days


def _bundle(args):
    if getattr(args, "data", None):
        return load_dataset_dir(args.data)
    return load_dataset_bundle(args.inter, args.user, args.item)


def _window_rows(bundle, args):
    if not getattr(args, "train_date", None):
        return np.arange(len(bundle.interactions))
    import datetime as dt
    last = dt.date.fromisoformat(args.train_date)
    first = last - dt.timedelta(days=args.window - 1)
    return rows_on_days(bundle, first, last)


def cmd_data_validate(args):
    bundle = load_dataset_bundle(args.inter, args.user, args.item)
    print(json.dumps(dataclasses.asdict(bundle.report), indent=2))


def cmd_data_synth(args):
    cfg = load_synth_config(args.config) if args.config else None
    if cfg is None:
        from .dataset import SynthConfig
        cfg = SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    paths = generate_synthetic_dataset(cfg, args.out)
    for kind, path in paths.items():
        print(f"{kind}\t{path}")


def cmd_kg_extract(args):
    bundle = _bundle(args)
    rows = _window_rows(bundle, args)
    items = {bundle.interactions[i]["item_id"] for i in rows}
    kg = extract_knowledge_graph(bundle.items, ExtractionConfig(), items)
    write_kg(kg, args.out)
    print(f"entities\t{kg.n_entities}\ntriples\t{len(kg.triples)}\nisolated_items\t{kg.report.isolated_items}")


def cmd_kg_profiles(args):
    bundle = _bundle(args)
    kg = read_kg(args.kg)
    rows = _window_rows(bundle, args)
    store = build_all_profiles(click_histories(bundle, rows), kg, args.hops, args.memory, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profiles.bin").write_bytes(archive_mod.encode_blob({
        "user_ids": archive_mod._strings(store.user_ids), "heads": store.heads,
        "relations": store.relations, "tails": store.tails, "depth": store.depth,
        "unknown_items": store.unknown_items}))
    print(f"users\t{len(store)}\nempty\t{int((store.depth == 0).sum())}")


def cmd_train(args):
    cfg = load_config(args.config)
    if args.data:
        cfg.data_dir, cfg.inter_path, cfg.user_path, cfg.item_path = args.data, None, None, None
    if args.seed is not None:
        cfg.seed = cfg.model.seed = cfg.encoder.seed = args.seed
    cfg.work_dir = args.out
    result = run_pipeline(cfg, until="archive")
    print(f"archive\t{result.archive_path}\ncontent_hash\t{result.content_hash}")


def cmd_coldstart_index(args):
    art = open_archive(args.archive)
    bundle = load_dataset_dir(args.data)
    index = build_similarity_index(art.kg, item_contents(bundle.items))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(archive_mod.encode_blob({
        "item_ids": archive_mod._strings(index.item_ids), "vectors": index.vectors,
        "entity_ids": index.entity_ids}))
    print(f"indexed\t{len(index)}\nzero_norm\t{index.excluded_zero_norm}\nmissing\t{index.excluded_missing}")


def cmd_coldstart_eval(args):
    art = open_archive(args.archive)
    bundle = load_dataset_dir(args.data)
    report = evaluate_bridge(art.params, art.kg, item_contents(bundle.items), args.strategy,
                             args.holdout, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bridge_report(report, out / "bridge.tsv", out / "histogram.csv")
    print(f"pairs\t{len(report.item_ids)}\nmean_cosine\t{report.mean:.6f}\nmedian_cosine\t{report.median:.6f}")


def cmd_eval(args):
    art = open_archive(args.archive)
    bundle = load_dataset_dir(args.data)
    baseline = read_baseline_scores(args.baseline) if args.baseline else None
    cmp = build_slice_report(art, bundle, args.train_date, args.k, item_contents(bundle.items),
                             args.strategy, baseline_scores=baseline)
    sys.stdout.write(cmp.render_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "slices.tsv").write_text(cmp.to_tsv())
        (out / "table.txt").write_text(cmp.render_table())


def cmd_pipeline_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = cfg.model.seed = cfg.encoder.seed = args.seed
    if args.out:
        cfg.serving_dir = args.out
    result = run_pipeline(cfg)
    for entry in result.log:
        print(f"{entry['stage']}\t{entry['status']}")
    print(f"deployed\t{result.archive_path}\ncontent_hash\t{result.content_hash}")


def cmd_recommend(args):
    art = open_archive(args.archive)
    content = None
    if args.data:
        content = item_contents(load_dataset_dir(args.data).items)
    candidates = [c for c in args.items.split(",") if c] if args.items else None
    recs = recommend(art, args.user, candidates, args.n, args.strategy, content)
    sys.stdout.write(format_recommendations(recs))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ripplerec", description="Knowledge-aware news recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data").add_subparsers(dest="action", required=True)
    p = data.add_parser("validate", help="parse atomic files and report dangling references")
    p.add_argument("--inter", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.set_defaults(func=cmd_data_validate)
    p = data.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_data_synth)

    kg = sub.add_parser("kg").add_subparsers(dest="action", required=True)
    for name, func in (("extract", cmd_kg_extract), ("profiles", cmd_kg_profiles)):
        p = kg.add_parser(name)
        p.add_argument("--data", help="directory holding the .inter/.user/.item files")
        p.add_argument("--inter")
        p.add_argument("--user")
        p.add_argument("--item")
        p.add_argument("--train-date")
        p.add_argument("--window", type=int, default=1)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "profiles":
            p.add_argument("--kg", required=True)
            p.add_argument("--hops", type=int, default=5)
            p.add_argument("--memory", type=int, default=16)
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="extract, build profiles, train and archive (no deploy)")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    cs = sub.add_parser("coldstart").add_subparsers(dest="action", required=True)
    p = cs.add_parser("index")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coldstart_index)
    p = cs.add_parser("eval")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=("similarity", "encoder"), default="similarity")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coldstart_eval)

    p = sub.add_parser("eval", help="three-slice offline evaluation")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-date", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--strategy", choices=("known_only", "similarity", "encoder"))
    p.add_argument("--baseline", help="TSV of user_id, item_id, day, score")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    pipe = sub.add_parser("pipeline").add_subparsers(dest="action", required=True)
    p = pipe.add_parser("run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="serving directory (overrides the config)")
    p.set_defaults(func=cmd_pipeline_run)

    p = sub.add_parser("recommend")
    p.add_argument("--archive", required=True, help="archive directory or serving directory")
    p.add_argument("--user", required=True)
    p.add_argument("--items", help="comma-separated candidate item ids")
    p.add_argument("--n", type=int)
    p.add_argument("--strategy", choices=("known_only", "similarity", "encoder"))
    p.add_argument("--data", help="dataset directory supplying content embeddings of unseen items")
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (DatasetError, PipelineError, archive_mod.ArchiveError, ValueError, KeyError,
            FileNotFoundError) as err:
        print(f"ripplerec: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
