import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unimr.core import DataError, DimMismatch, DuplicateId, EmbeddingRecord, Modality
from unimr.index import build, load_index, load_store, merge, save_store


def random_records(rng, n, dim, prefix="d"):
    X = rng.standard_normal((n, dim))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return [EmbeddingRecord(f"{prefix}{k:05d}", Modality(k % 3), X[k]) for k in rng.permutation(n)]


def full_sort_oracle(records, q, k):
    scored = [(np.float32(np.dot(np.float64(r.vector), q)), r.id) for r in records]
    return [doc for _, doc in sorted(scored, key=lambda t: (-t[0], t[1]))[:k]]


def test_empty_and_duplicates():
    assert len(build([], dim=4)) == 0
    assert build([], dim=4).search(np.ones(4) / 2, 5) == []
    r = EmbeddingRecord("a", Modality.TEXT, [1.0, 0.0])
    with pytest.raises(DuplicateId):
        build([r, r])


def test_exact_search_against_full_sort():
    rng = np.random.default_rng(0)
    records = random_records(rng, 10_000, 64)
    idx = build(records)
    assert len(idx) == 10_000
    queries = rng.standard_normal((100, 64))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    batch = idx.search_batch(queries, 50)
    for q, hits in zip(queries, batch):
        assert [h.doc_id for h in hits] == full_sort_oracle(records, q, 50)
        assert [h.rank for h in hits] == list(range(1, 51))


def test_self_query_scores_one():
    rng = np.random.default_rng(1)
    records = random_records(rng, 50, 16)
    idx = build(records)
    top = idx.search(records[7].vector, 1)[0]
    assert top.doc_id == records[7].id and top.score == pytest.approx(1.0, abs=1e-5)


def test_k_larger_than_pool():
    rng = np.random.default_rng(2)
    records = random_records(rng, 5, 8)
    hits = build(records).search(records[0].vector, 50)
    assert len(hits) == 5
    assert all(a.score >= b.score for a, b in zip(hits, hits[1:]))


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 50))
@settings(max_examples=60)
def test_order_and_tie_rule(seed, n, k):
    rng = np.random.default_rng(seed)
    # a coarse grid of vectors makes equal scores common
    base = np.round(rng.standard_normal((n, 3)) * 2) + np.array([0.0, 0.0, 0.5])
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    records = [EmbeddingRecord(f"id{k2}", Modality.TEXT, v) for k2, v in zip(rng.permutation(n), base)]
    hits = build(records).search(np.array([1.0, 0.0, 0.0]), k)
    for a, b in zip(hits, hits[1:]):
        assert a.score > b.score or (a.score == b.score and a.doc_id < b.doc_id)


def test_search_batch_edge_cases():
    rng = np.random.default_rng(3)
    records = random_records(rng, 100, 8)
    idx = build(records)
    assert idx.search_batch(np.zeros((0, 8)), 5) == []
    q = records[3].vector.astype(np.float64)
    assert idx.search_batch(q[None, :], 5) == [idx.search(q, 5)]
    qs = rng.standard_normal((64, 8))
    assert idx.search_batch(qs, 10) == [idx.search(v, 10) for v in qs]


def test_merge():
    rng = np.random.default_rng(4)
    a, b = random_records(rng, 300, 16, "a"), random_records(rng, 200, 16, "b")
    merged = merge([build(a, "x"), build(b, "y")])
    assert len(merged) == 500
    whole = build(a + b)
    for q in rng.standard_normal((20, 16)):
        assert merged.search(q, 40) == whole.search(q, 40)
        # search-then-merge under the same tie rule
        parts = build(a).search(q, 40) + build(b).search(q, 40)
        resorted = sorted(parts, key=lambda h: (-h.score, h.doc_id))[:40]
        assert [h.doc_id for h in merged.search(q, 40)] == [h.doc_id for h in resorted]
    with pytest.raises(DuplicateId):
        merge([build(a), build(a[:1])])
    with pytest.raises(DimMismatch):
        merge([build(a), build(random_records(rng, 3, 4, "c"))])


def test_unit_norm_required():
    from unimr.index import VectorIndex
    with pytest.raises(DataError):
        VectorIndex(2, ["a"], [Modality.TEXT], np.array([[1.0, 1.0]]))


def test_store_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    records = random_records(rng, 40, 12)
    records.append(EmbeddingRecord("ümlaut-id", Modality.IMAGE_TEXT, np.eye(12)[0]))
    save_store(tmp_path / "s.umre", records)
    assert load_store(tmp_path / "s.umre") == records
    idx = load_index(tmp_path / "s.umre")
    assert idx.records() == records

    blob = (tmp_path / "s.umre").read_bytes()
    assert blob[:4] == b"UMRE"
    (tmp_path / "bad.umre").write_bytes(blob[:-3])
    with pytest.raises(DataError):
        load_store(tmp_path / "bad.umre")
    save_store(tmp_path / "empty.umre", [], dim=12)
    assert len(load_index(tmp_path / "empty.umre")) == 0
