import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unimr.core import (
    DataError,
    DuplicateId,
    EmbeddingRecord,
    Item,
    Metric,
    Modality,
    ModalityMismatch,
    Qrels,
    Query,
    TaskSpec,
    load_corpus,
    load_qrels,
    load_queries,
    load_tasks,
    save_corpus,
    save_qrels,
    save_queries,
    save_tasks,
    validate_item,
)


def test_wellformed_text_item():
    it = validate_item({"id": "d1", "modality": "text", "txt": "a cat"})
    assert it.modality is Modality.TEXT and it.text == "a cat" and not it.has_image


def test_image_item_with_text_is_rejected():
    with pytest.raises(ModalityMismatch):
        validate_item({"id": "d2", "modality": "image", "txt": "x"})


def test_wellformed_image_text_item():
    it = validate_item({"id": "d3", "modality": "image,text", "txt": "hat", "img_feat": [0.1, 0.2, 0.3]})
    assert it.modality is Modality.IMAGE_TEXT
    np.testing.assert_array_equal(it.image_feat, [0.1, 0.2, 0.3])


@pytest.mark.parametrize("raw", [
    {"id": "x", "modality": "text"},                       # text tag, no text
    {"id": "x", "modality": "image,text", "txt": "a"},     # missing image
    {"id": "x", "txt": "a", "img_feat": [1.0], "img_ref": "a.bin"},
    {"modality": "text", "txt": "a"},
    {"id": "x", "modality": "video", "txt": "a"},
    {"id": "x", "modality": "image", "img_feat": [float("nan")]},
])
def test_bad_records(raw):
    with pytest.raises(DataError):
        validate_item(raw)


def test_modality_inferred_for_queries():
    assert validate_item({"qid": "q", "txt": "a", "img_ref": "i.bin"}).modality is Modality.IMAGE_TEXT
    assert validate_item({"qid": "q", "img_ref": "i.bin"}).modality is Modality.IMAGE


def test_modality_order_and_tags():
    assert Modality.TEXT < Modality.IMAGE < Modality.IMAGE_TEXT
    for m in Modality:
        assert Modality.parse(m.tag) is m
    assert Modality.parse("Text, Image") is Modality.IMAGE_TEXT


def test_item_is_immutable():
    it = validate_item({"id": "d", "modality": "image", "img_feat": [1.0, 0.0]})
    with pytest.raises(ValueError):
        it.image_feat[0] = 3.0


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=30)
_feat = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8)


@st.composite
def raw_records(draw):
    m = draw(st.sampled_from(list(Modality)))
    rec = {"id": draw(st.text(min_size=1, max_size=10)), "modality": m.tag}
    if m.has_text:
        rec["txt"] = draw(_text.filter(lambda s: s.strip()))
    if m.has_image:
        if draw(st.booleans()):
            rec["img_feat"] = draw(_feat)
        else:
            rec["img_ref"] = draw(st.text(min_size=1, max_size=12))
    return rec


@given(raw_records())
def test_validate_is_idempotent(raw):
    it = validate_item(raw)
    assert validate_item(it.to_record()) == it


@given(raw_records())
def test_record_roundtrips_through_json(raw):
    it = validate_item(raw)
    back = validate_item(json.loads(json.dumps(it.to_record())))
    assert back == it and back.modality is it.modality
    if it.image_feat is not None:
        assert back.image_feat.tobytes() == it.image_feat.tobytes()


def test_task_requires_instruction():
    with pytest.raises(DataError):
        TaskSpec("1", "ds", "   ", Modality.TEXT)
    with pytest.raises(DataError):
        TaskSpec.from_record({"task_id": "1", "dataset_id": "d", "instruction": "x", "desired_modality": "text",
                              "metric": "F1"})


def test_qrels_invariants():
    with pytest.raises(DataError):
        Qrels({"q": {"d": 0}})
    with pytest.raises(DataError):
        Qrels({"q": {"d": -1, "e": 1}})
    qr = Qrels({"q": {"d": 2, "e": 0}})
    assert qr.relevant("q") == {"d"} and qr.grade("q", "zz") == 0
    with pytest.raises(DataError):
        qr.check_pool(["e"])


def test_embedding_record_norm():
    EmbeddingRecord("a", Modality.TEXT, [0.6, 0.8])
    with pytest.raises(DataError):
        EmbeddingRecord("a", Modality.TEXT, [0.6, 0.9])


def test_file_roundtrips(tmp_path):
    items = [
        Item("d1", Modality.TEXT, "a cat"),
        Item("d2", Modality.IMAGE, None, np.array([0.6, 0.8])),
        Item("d3", Modality.IMAGE_TEXT, "hat", None, "img/d3.bin"),
    ]
    save_corpus(tmp_path / "c.jsonl", items)
    assert load_corpus(tmp_path / "c.jsonl") == items

    queries = [Query(Item("q1", Modality.TEXT, "where"), "1", ("d1",), "train"),
               Query(Item("q2", Modality.IMAGE, None, None, "q2.bin"), "2", ("d2", "d3"))]
    save_queries(tmp_path / "q.jsonl", queries)
    assert load_queries(tmp_path / "q.jsonl") == queries

    tasks = [TaskSpec("1", "ds", "Find it.", Modality.TEXT, Metric.NDCG_AT_10)]
    save_tasks(tmp_path / "t.jsonl", tasks)
    assert list(load_tasks(tmp_path / "t.jsonl").values()) == tasks

    qr = Qrels({"q1": {"d1": 1}, "q2": {"d2": 2, "d3": 0}})
    save_qrels(tmp_path / "qrels.txt", qr)
    assert load_qrels(tmp_path / "qrels.txt") == qr


def test_duplicate_ids_fail_fast(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"a","modality":"text","txt":"x"}\n{"id":"a","modality":"text","txt":"y"}\n')
    with pytest.raises(DuplicateId):
        load_corpus(p)


def test_corpus_needs_modality_tag(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"a","txt":"x"}\n')
    with pytest.raises(DataError):
        load_corpus(p)
