"""Run the retraining pipeline, interrupt it, resume it, and serve recommendations.

Run: python3 demos/pipeline_and_serving.py
"""
import os
import tempfile
from pathlib import Path

from ripplerec.config import config_from_mapping
from ripplerec.dataset import SynthConfig, generate_synthetic_dataset
from ripplerec.pipeline import StopPipeline, run_pipeline
from ripplerec.serving import format_recommendations, open_archive, recommend


def main():
    root = Path(tempfile.mkdtemp(prefix="ripplerec-demo-"))
    generate_synthetic_dataset(SynthConfig(n_users=200, n_items=100, n_days=7, n_topics=5, seed=0), root / "data")
    cfg = config_from_mapping({
        "data": {"dir": "data"},
        "pipeline": {"train_date": "2025-03-15", "train_window_days": 3, "work_dir": "work",
                     "serving_dir": "serving"},
        "model": {"n_hop": 2, "n_memory": 16, "learning_rate": 0.5, "batch_size": 32, "max_epochs": 20},
    }, root)

    # pretend the machine went down right after training
    try:
        run_pipeline(cfg, stop_after="train")
    except StopPipeline as stop:
        print(f"interrupted: {stop}")
    print("completed markers:", sorted(p.stem for p in (root / "work" / "markers").glob("*.done")))

    result = run_pipeline(cfg)
    for entry in result.log:
        print(f"  {entry['stage']:<11} {entry['status']}")
    current = root / "serving" / "current"
    print(f"serving/current -> {os.readlink(current)}")

    artifacts = open_archive(root / "serving")
    print()
    print("top 5 for u00001:")
    print(format_recommendations(recommend(artifacts, "u00001", n=5)))
    print()
    print("a user never seen in training gets the popularity fallback:")
    print(format_recommendations(recommend(artifacts, "newcomer", n=3)))


if __name__ == "__main__":
    main()
