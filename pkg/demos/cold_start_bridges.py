"""Compare the two cold-start bridges on items hidden from a trained model.

Run: python3 demos/cold_start_bridges.py
"""
import tempfile

from ripplerec.coldstart import EncoderConfig, evaluate_bridge, item_contents
from ripplerec.dataset import SynthConfig, generate_synthetic_dataset, load_dataset_dir, make_temporal_splits
from ripplerec.model import ModelConfig
from ripplerec.workflow import fit


def bar(count, scale):
    return "#" * int(round(40 * count / scale))


def main():
    out = tempfile.mkdtemp(prefix="ripplerec-demo-")
    generate_synthetic_dataset(SynthConfig(n_users=200, n_items=100, n_days=7, n_topics=5, seed=0), out)
    bundle = load_dataset_dir(out)
    part = make_temporal_splits(bundle).partition(bundle)
    config = ModelConfig(n_hop=2, n_memory=16, learning_rate=0.5, batch_size=32, max_epochs=20)
    artifacts, _ = fit(bundle, part["train"], part["valid"], config)
    content = item_contents(bundle.items)

    # hold out 20% of the known items and ask each bridge to rebuild their embeddings
    for strategy in ("similarity", "encoder"):
        report = evaluate_bridge(artifacts.params, artifacts.kg, content, strategy, holdout_fraction=0.2,
                                 encoder_config=EncoderConfig(hidden=(32,), epochs=300))
        print(f"{strategy}: {len(report.item_ids)} items, mean cosine {report.mean:.3f}, "
              f"median {report.median:.3f}")
        scale = max(report.counts.max(), 1)
        for lo, hi, count in zip(report.edges[:-1], report.edges[1:], report.counts):
            if count:
                print(f"  [{lo:+.2f}, {hi:+.2f})  {count:3d} {bar(count, scale)}")
        if strategy == "similarity":
            pairs = list(zip(report.item_ids, report.matched_ids, [round(float(c), 3) for c in report.cosines]))[:5]
            print("  examples (held out, matched, cosine):", pairs)
        print()


if __name__ == "__main__":
    main()
