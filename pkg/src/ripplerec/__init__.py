"""Knowledge-aware news recommendation with ripple-set propagation and cold-start bridging."""
from .coldstart import (
    build_similarity_index, encode_content, nearest_known_item, resolve_embedding,
    similarity_histogram, train_encoder,
)
from .dataset import (
    generate_synthetic_dataset, load_dataset_bundle, make_temporal_splits, parse_atomic_file,
)
from .evaluation import build_slice_report, evaluate_slice
from .kg import build_all_profiles, build_ripple_profile, extract_knowledge_graph
from .metrics import ndcg_at_k, precision_recall_at_k
from .model import ModelConfig, batch_loss, init_parameters, score_candidate, train

__version__ = "0.1.0"
