import numpy as np
import pytest

from oracles import encoder_gradient_error, make_kg
from ripplerec.coldstart import (
    BridgeError, EmbeddingResolver, EncoderConfig, EncoderParams, HashingTextProvider,
    build_similarity_index, cosine_loss, encode_content, evaluate_bridge, init_encoder,
    nearest_known_item, resolve_embedding, similarity_histogram, train_encoder, write_bridge_report,
)
from ripplerec.model import ColdStartUnresolved, init_parameters


def _kg(items):
    return make_kg([f"item:{i}" for i in items], [])


def test_cosine_loss_extremes():
    enc = EncoderParams([np.eye(2)], [np.zeros(2)])
    X = np.array([[1.0, 2.0]])
    assert cosine_loss(enc, X, X)[0] == pytest.approx(0.0, abs=1e-12)
    assert cosine_loss(enc, X, np.array([[-2.0, 1.0]]))[0] == pytest.approx(1.0, abs=1e-12)


def test_encoder_gradients():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert encoder_gradient_error(rng) < 1e-4


def test_zero_encoder_outputs_zero():
    enc = init_encoder(256, 8)
    enc = EncoderParams([w * 0 for w in enc.weights], [b * 0 for b in enc.biases])
    assert np.all(encode_content(enc, np.ones(256)) == 0)


def test_encoder_is_deterministic_and_checks_length():
    enc = init_encoder(256, 8, seed=2)
    x = np.random.default_rng(0).normal(size=256)
    assert np.array_equal(encode_content(enc, x), encode_content(enc, x))
    with pytest.raises(BridgeError, match="255"):
        encode_content(enc, np.ones(255))


def test_encoder_training_reduces_loss():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 12))
    Y = X[:, :4] @ rng.normal(size=(4, 4))
    Y[0] = 0
    res = train_encoder(X, Y, EncoderConfig(epochs=60, hidden=(16, 8), batch_size=16))
    assert res.skipped == 1
    assert res.n_holdout == 8
    assert res.curve[-1]["train_loss"] < res.curve[0]["train_loss"]


def test_index_normalizes_and_reports_exclusions():
    kg = _kg(["a", "b", "c", "z", "m"])
    content = {"a": np.array([3.0, 4.0]), "b": np.array([0.0, 2.0]), "c": np.array([1.0, 1.0]),
               "z": np.zeros(2)}
    index = build_similarity_index(kg, content)
    assert index.item_ids == ("a", "b", "c")
    np.testing.assert_allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-6)
    assert (index.excluded_zero_norm, index.excluded_missing) == (1, 1)


def test_nearest_neighbour_examples():
    kg = _kg(["e1", "e2", "e3"])
    index = build_similarity_index(kg, {"e1": np.array([1.0, 0.0]), "e2": np.array([0.0, 1.0]),
                                        "e3": np.array([0.6, 0.8])})
    item, cos = nearest_known_item(index, np.array([0.8, 0.6]))
    assert item == "e3" and cos == pytest.approx(0.96)
    assert nearest_known_item(index, np.array([0.0, 1.0])) == ("e2", 1.0)


def test_ties_go_to_smallest_id():
    kg = _kg(["b", "a", "c"])
    index = build_similarity_index(kg, {"b": np.array([1.0, 1.0]), "a": np.array([2.0, 2.0]),
                                        "c": np.array([0.0, 1.0])})
    assert nearest_known_item(index, np.array([5.0, 5.0]))[0] == "a"


def test_zero_query_rejected():
    index = build_similarity_index(_kg(["a"]), {"a": np.ones(2)})
    with pytest.raises(BridgeError):
        nearest_known_item(index, np.zeros(2))


def test_resolution_paths():
    kg = _kg(["a", "b"])
    params = init_parameters(2, 1, dim=4, seed=0)
    index = build_similarity_index(kg, {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])})
    known = resolve_embedding("a", params, kg, index)
    assert known.provenance == "known" and np.array_equal(known.vector, params.entity_emb[kg.item_entity("a")])
    dup = resolve_embedding("new", params, kg, index, content=np.array([0.0, 3.0]))
    assert dup.provenance == "matched:b"
    assert np.array_equal(dup.vector, params.entity_emb[kg.item_entity("b")])
    with pytest.raises(ColdStartUnresolved):
        resolve_embedding("new", params, kg, index, strategy="known_only", content=np.ones(2))
    with pytest.raises(ColdStartUnresolved):
        resolve_embedding("new", params, kg, index)
    enc = init_encoder(2, 4)
    out = resolve_embedding("new", params, kg, index, enc, "encoder", np.ones(2))
    assert out.provenance == "encoded" and out.vector.shape == (4,)
    with pytest.raises(ValueError):
        resolve_embedding("a", params, kg, index, strategy="magic")


def test_resolver_caches():
    kg = _kg(["a"])
    params = init_parameters(1, 1, dim=2)
    index = build_similarity_index(kg, {"a": np.ones(2)})
    calls = []
    r = EmbeddingResolver(params, kg, "similarity", index, content=lambda i: calls.append(i) or np.ones(2))
    r.resolve("x")
    r.resolve("x")
    assert calls == ["x"]


def test_histogram_extremes():
    v = np.random.default_rng(0).normal(size=(5, 3))
    rep = similarity_histogram(v, v)
    assert rep.counts[-1] == 5 and rep.counts.sum() == 5
    rep = similarity_histogram(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    lo = rep.edges[:-1][rep.counts == 1][0]
    assert lo <= 0.0 <= lo + 2.0 / len(rep.counts)


def test_bridge_report_files(tmp_path):
    rng = np.random.default_rng(0)
    ids = [f"i{k}" for k in range(20)]
    kg = _kg(ids)
    params = init_parameters(20, 1, dim=4)
    content = {i: rng.normal(size=8) for i in ids}
    rep = evaluate_bridge(params, kg, content, "similarity", 0.2, seed=1)
    assert len(rep.item_ids) == 4 and all(m not in rep.item_ids for m in rep.matched_ids)
    write_bridge_report(rep, tmp_path / "b.tsv", tmp_path / "h.csv")
    assert len((tmp_path / "b.tsv").read_text().splitlines()) == 5
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 51
    enc_rep = evaluate_bridge(params, kg, content, "encoder", 0.2, seed=1,
                              encoder_config=EncoderConfig(epochs=5, hidden=(4,)))
    assert enc_rep.strategy == "encoder" and len(enc_rep.cosines) == 4


def test_hashing_provider_is_stable():
    p = HashingTextProvider(dim=32)
    a = p.embed({"title": "Election results", "lead": "", "text": "votes counted"})
    assert np.array_equal(a, p.embed({"title": "Election results", "lead": "", "text": "votes counted"}))
    assert a.shape == (32,) and np.linalg.norm(a) == pytest.approx(1.0)
