import json
import random
import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from hierag.embed_store import (
    HashEmbedder,
    Method,
    RemoteEmbedder,
    VectorIndex,
    build_index,
    cosine,
    embed,
    retrieve,
)
from hierag.errors import DimensionMismatch, DuplicateDocId, IndexNotFound
from test_llm_backend import SECRET, _Stub


def rand_text(rng, max_words=12):
    return " ".join("".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 6)))
                    for _ in range(rng.randint(1, max_words)))


def test_hash_embedding_determinism_and_empty():
    h = HashEmbedder()
    assert np.array_equal(embed(h, "abc"), embed(HashEmbedder(), "abc"))
    zero = embed(h, "")
    assert zero.shape == (64,) and np.all(zero == 0)
    assert embed(HashEmbedder(dim=16, seed=1), "abc").shape == (16,)
    assert not np.array_equal(embed(HashEmbedder(seed=1), "abc"), embed(h, "abc"))


def test_hash_embedding_no_collisions():
    rng = random.Random(11)
    h = HashEmbedder()
    for _ in range(1000):
        a, b = rand_text(rng), rand_text(rng)
        if sorted(a.split()) == sorted(b.split()):
            continue  # bag-of-words: same multiset is the same text to the embedder
        va, vb = h.embed(a), h.embed(b)
        assert not np.array_equal(va, vb)
        assert cosine(va, vb) < 1.0


def test_cosine_zero_vector():
    v = np.array([1.0, 2.0])
    assert cosine(v, np.zeros(2)) == 0.0
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def docs_from(texts):
    return [(f"doc{i:03d}", t, {"path": f"p{i}"}) for i, t in enumerate(texts)]


def test_build_index_basics():
    h = HashEmbedder()
    empty = build_index([], h)
    assert len(empty) == 0 and empty.dim == 64
    assert retrieve(empty, "anything", 3, h) == []
    with pytest.raises(DuplicateDocId):
        build_index([("a", "x", {}), ("a", "y", {})], h)


def test_156_implicit_docs():
    index = build_index(docs_from(f"node {i} summary" for i in range(156)), HashEmbedder(), Method.IMPLICIT)
    assert len(index) == 156
    assert all(d.metadata["method"] == "Implicit" for d in index.docs)


def test_self_query_ranks_first():
    rng = random.Random(5)
    texts = [rand_text(rng) for _ in range(30)]
    h = HashEmbedder()
    index = build_index(docs_from(texts), h)
    for i in (0, 7, 29):
        top, score = retrieve(index, texts[i], 1, h)[0]
        assert top.doc_id == f"doc{i:03d}"
        assert abs(score - 1.0) <= 1e-9


def test_k_larger_than_index():
    h = HashEmbedder()
    index = build_index(docs_from(["a b", "c d", "e f"]), h)
    assert len(retrieve(index, "a", 10, h)) == 3
    with pytest.raises(ValueError):
        retrieve(index, "a", 0, h)


def test_ten_docs_top3_matches_brute_force():
    rng = random.Random(8)
    h = HashEmbedder()
    texts = [rand_text(rng) for _ in range(10)]
    index = build_index(docs_from(texts), h)
    query = rand_text(rng)
    expected = oracles.rank(h.embed(query).tolist(), [(d.doc_id, d.embedding.tolist()) for d in index.docs], 3)
    got = [(d.doc_id, s) for d, s in retrieve(index, query, 3, h)]
    assert [g[0] for g in got] == [e[0] for e in expected]
    assert [g[1] for g in got] == pytest.approx([e[1] for e in expected], abs=1e-9)


def test_ties_broken_by_doc_id():
    h = HashEmbedder()
    index = build_index([("b", "same words", {}), ("a", "same words", {}), ("c", "other", {})], h)
    assert [d.doc_id for d, _ in retrieve(index, "same words", 3, h)][:2] == ["a", "b"]
    # zero query: every score is 0, so order is by id
    assert [d.doc_id for d, s in retrieve(index, "", 3, h)] == ["a", "b", "c"]


def test_shuffled_input_same_results():
    rng = random.Random(2)
    docs = docs_from(rand_text(rng) for _ in range(40))
    h = HashEmbedder()
    a = build_index(docs, h)
    shuffled = docs[:]
    rng.shuffle(shuffled)
    b = build_index(shuffled, h)
    for _ in range(20):
        q = rand_text(rng)
        ra = [(d.doc_id, s) for d, s in retrieve(a, q, 5, h)]
        assert ra == [(d.doc_id, s) for d, s in retrieve(b, q, 5, h)]


def test_persistence_round_trip(tmp_path):
    rng = random.Random(4)
    h = HashEmbedder(dim=32, seed=9)
    index = build_index(docs_from(rand_text(rng) for _ in range(25)), h, Method.BASELINE)
    index.save(tmp_path / "idx")
    meta = json.loads((tmp_path / "idx" / "index.meta.json").read_text())
    assert meta["dim"] == 32 and meta["method"] == "Baseline" and meta["count"] == 25
    assert meta["embed_backend"] == {"backend": "hash", "dim": 32, "seed": 9}
    assert meta["embed_backend_id"] == "hash:d32:s9"
    lines = (tmp_path / "idx" / "index.jsonl").read_text().splitlines()
    assert len(lines) == 25 and len(json.loads(lines[0])["embedding"]) == 32
    loaded = VectorIndex.load(tmp_path / "idx")
    for _ in range(10):
        q = rand_text(rng)
        assert [(d.doc_id, s) for d, s in retrieve(loaded, q, 4, h)] == \
               [(d.doc_id, s) for d, s in retrieve(index, q, 4, h)]
    with pytest.raises(IndexNotFound):
        VectorIndex.load(tmp_path / "nothing")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(0, 60), k=st.integers(1, 70))
def test_retrieve_equals_full_sort(seed, n, k):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, 8))
    if n > 2:
        vecs[1] = vecs[0]  # force a tie
        vecs[2] = 0.0  # and a zero vector
    index = VectorIndex([_doc(f"d{i:02d}", v) for i, v in enumerate(vecs)], 8, {"backend": "hash", "dim": 8})
    q = rng.standard_normal(8)
    got = [(d.doc_id, s) for d, s in index.search(q, k)]
    want = oracles.rank(q.tolist(), [(f"d{i:02d}", v.tolist()) for i, v in enumerate(vecs)], k)
    assert [g[0] for g in got] == [w[0] for w in want]
    assert all(abs(g[1] - w[1]) <= 1e-9 and -1 <= g[1] <= 1 for g, w in zip(got, want))


def _doc(doc_id, vec):
    from hierag.embed_store import IndexedDoc
    return IndexedDoc(doc_id, doc_id, np.asarray(vec, dtype=float), {})


def test_index_rejects_wrong_dim():
    with pytest.raises(DimensionMismatch):
        VectorIndex([_doc("a", [1.0, 2.0])], 3, {"backend": "hash", "dim": 3})


def _emb_body(vectors):
    return {"data": [{"index": i, "embedding": v} for i, v in enumerate(vectors)]}


def test_remote_embedder_learns_and_enforces_dim():
    url_body = [(200, _emb_body([[0.1, 0.2, 0.3]])), (200, _emb_body([[1.0, 2.0]]))]
    with _Stub(url_body) as stub:
        emb = RemoteEmbedder(stub.url.replace("chat/completions", "embeddings"), "emb-model", api_key=SECRET,
                             backoff_base=0.001)
        assert emb.embed("a").tolist() == [0.1, 0.2, 0.3]
        assert emb.dim == 3
        with pytest.raises(DimensionMismatch):
            emb.embed("b")
    assert stub.requests[0][1] == {"model": "emb-model", "input": ["a"]}


def test_remote_embedder_in_index():
    with _Stub([(200, _emb_body([[1.0, 0.0], [0.0, 1.0]])), (200, _emb_body([[0.9, 0.1]]))]) as stub:
        emb = RemoteEmbedder(stub.url, "m", api_key=SECRET)
        index = build_index([("x", "first", {}), ("y", "second", {})], emb, Method.IMPLICIT)
        assert index.dim == 2
        assert [d.doc_id for d, _ in retrieve(index, "q", 2, emb)] == ["x", "y"]
    assert index.embed_config["backend"] == "remote" and "api_key" not in json.dumps(index.embed_config)
