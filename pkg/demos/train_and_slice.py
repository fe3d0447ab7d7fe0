"""Train on one day of synthetic news traffic and watch quality fall off on the days around it.

Run: python3 demos/train_and_slice.py
"""
import tempfile

from ripplerec.coldstart import item_contents
from ripplerec.dataset import SynthConfig, generate_synthetic_dataset, load_dataset_dir
from ripplerec.evaluation import build_slice_report
from ripplerec.model import ModelConfig
from ripplerec.workflow import fit, rows_on_days
import datetime as dt


def main():
    out = tempfile.mkdtemp(prefix="ripplerec-demo-")
    # "daily" gives every day its own catalog, the situation a news site faces
    synth = SynthConfig(n_users=200, n_items=140, n_days=7, n_topics=5, catalog="daily", seed=0)
    generate_synthetic_dataset(synth, out)
    bundle = load_dataset_dir(out)
    print(f"{len(bundle.interactions)} impressions, {len(bundle.users)} users, {len(bundle.items)} items")

    train_day = dt.date(2025, 3, 15)
    rows = rows_on_days(bundle, train_day, train_day)
    config = ModelConfig(n_hop=2, n_memory=16, learning_rate=0.5, batch_size=32, max_epochs=10)
    artifacts, result = fit(bundle, rows, config=config, train_date=train_day.isoformat())
    print(f"knowledge graph: {artifacts.kg.n_entities} entities, {len(artifacts.kg.triples)} triples")
    print("training loss by epoch:", " ".join(f"{e['loss']:.4f}" for e in result.log[1:]))

    # items from the neighbouring days were never trained on; they borrow the
    # embedding of the known item with the most similar content
    report = build_slice_report(artifacts, bundle, train_day, content=item_contents(bundle.items),
                                strategy="similarity")
    print()
    print(report.render_table())


if __name__ == "__main__":
    main()
