import itertools
import math

import pytest
from hypothesis import given, strategies as st

from unimr.core import Modality
from unimr.metrics import (
    ALL,
    MULTI_MODAL,
    SINGLE_MODAL,
    EmptyGroup,
    EmptyRelevant,
    RunReport,
    macro_average,
    map_at_5,
    modality_accuracy_at_1,
    ndcg_at_10,
    ndcg_at_k,
    recall_at_k,
)

DOCS = ["a", "b", "c", "d", "e", "f"]


# --- brute-force oracles -------------------------------------------------------

def recall_oracle(perm, rel, k):
    return float(any(perm[i] in rel for i in range(min(k, len(perm)))))


def dcg(seq, grades, k):
    return sum((2 ** grades.get(d, 0) - 1) / math.log2(i + 2) for i, d in enumerate(seq[:k]))


def ndcg_oracle(perm, grades, k):
    # ideal = best DCG over every ordering of the judged docs
    judged = list(grades)
    best = max(dcg(p, grades, k) for p in itertools.permutations(judged))
    return dcg(perm, grades, k) / best


def ap_oracle(perm, rel, k):
    precisions = [sum(d in rel for d in perm[: i + 1]) / (i + 1) for i in range(min(k, len(perm))) if perm[i] in rel]
    return sum(precisions) / min(k, len(rel))


def subsets(items):
    for r in range(1, len(items) + 1):
        yield from itertools.combinations(items, r)


def test_recall_and_ap_exhaustive():
    for n in range(1, 7):
        docs = DOCS[:n]
        for rel in subsets(docs):
            rel = set(rel)
            for perm in itertools.permutations(docs):
                for k in (1, 2, 3, 5, 10):
                    assert abs(recall_at_k(perm, rel, k) - recall_oracle(perm, rel, k)) <= 1e-12
                assert abs(map_at_5(perm, rel) - ap_oracle(perm, rel, 5)) <= 1e-12


def test_ndcg_exhaustive():
    grade_sets = [{"a": 1}, {"a": 1, "c": 1}, {"a": 2, "b": 1}, {"a": 3, "c": 1, "f": 2}, {"b": 1, "d": 0, "e": 2}]
    for grades in grade_sets:
        for n in range(1, 7):
            docs = DOCS[:n]
            for perm in itertools.permutations(docs):
                for k in (3, 10):
                    assert abs(ndcg_at_k(perm, grades, k) - ndcg_oracle(perm, grades, k)) <= 1e-12


def test_anchored_values():
    assert recall_at_k(["x", "x", "x", "x", "p"], {"p"}, 5) == 1.0
    assert recall_at_k(["x1", "x2", "x3", "x4", "x5", "p"], {"p"}, 5) == 0.0
    ranked = [f"x{k}" for k in range(6)] + ["p1", "x7", "p2"]
    assert recall_at_k(ranked, {"p1", "p2"}, 10) == 1.0
    assert recall_at_k(ranked, {"p1", "p2"}, 10, fraction=True) == 1.0
    assert abs(ndcg_at_10(["x", "p"], {"p": 1}) - 1 / math.log2(3)) < 1e-12
    assert abs(ndcg_at_10(["x", "p"], {"p": 1}) - 0.6309298) < 1e-7
    assert ndcg_at_10(["p", "q"], {"p": 2, "q": 1}) == 1.0
    assert ndcg_at_10([f"x{k}" for k in range(10)] + ["p"], {"p": 1}) == 0.0
    assert abs(map_at_5(["x", "y", "p"], {"p"}) - 1 / 3) < 1e-12
    assert map_at_5(["p1", "x", "y", "p2"], {"p1", "p2"}) == 0.75
    assert map_at_5(["x1", "x2", "x3", "x4", "x5", "p"], {"p"}) == 0.0


@given(st.permutations(DOCS), st.sets(st.sampled_from(DOCS), min_size=1))
def test_recall_monotone_in_k(perm, rel):
    vals = [recall_at_k(perm, rel, k) for k in range(1, 8)]
    assert vals == sorted(vals)


@given(st.permutations(DOCS), st.dictionaries(st.sampled_from(DOCS), st.integers(0, 3), min_size=1))
def test_ndcg_range_and_ideal(perm, grades):
    if not any(g > 0 for g in grades.values()):
        with pytest.raises(EmptyRelevant):
            ndcg_at_10(perm, grades)
        return
    v = ndcg_at_10(perm, grades)
    assert 0.0 <= v <= 1.0 + 1e-12
    ideal = sorted(DOCS, key=lambda d: -grades.get(d, 0))
    assert ndcg_at_10(ideal, grades) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 8))
def test_single_relevant_ap(r):
    ranked = [f"x{k}" for k in range(r - 1)] + ["p"] + ["y"]
    assert map_at_5(ranked, {"p"}) == pytest.approx(1 / r if r <= 5 else 0.0)


@given(st.permutations(DOCS), st.permutations(["t1", "t2", "t3", "t4"]), st.sets(st.sampled_from(DOCS), min_size=1))
def test_tail_order_irrelevant(head, tail, rel):
    ranked = list(head[:5]) + list(tail)
    shuffled = list(head[:5]) + list(reversed(tail))
    assert map_at_5(ranked, rel) == map_at_5(shuffled, rel)
    assert recall_at_k(ranked, rel, 5) == recall_at_k(shuffled, rel, 5)
    long = list(head) + [f"z{k}" for k in range(4)] + list(tail)
    long_shuffled = list(head) + [f"z{k}" for k in range(4)] + list(reversed(tail))
    grades = {d: 1 for d in rel}
    assert ndcg_at_10(long, grades) == ndcg_at_10(long_shuffled, grades)


def test_modality_accuracy():
    assert modality_accuracy_at_1(Modality.TEXT, Modality.TEXT) == 1.0
    assert modality_accuracy_at_1(Modality.IMAGE, Modality.TEXT) == 0.0
    assert modality_accuracy_at_1(Modality.IMAGE_TEXT, Modality.IMAGE) == 0.0
    assert modality_accuracy_at_1(None, Modality.IMAGE) == 0.0


def test_empty_relevant_errors():
    with pytest.raises(EmptyRelevant):
        recall_at_k(["a"], set(), 5)
    with pytest.raises(EmptyRelevant):
        map_at_5(["a"], set())


# --- macro averaging -------------------------------------------------------------

def test_macro_one_dataset():
    rep = macro_average({("ds", "1"): {"R@5": [1.0, 0.0]}})
    assert rep.rows[("ds", "1")]["R@5"] == 0.5 and rep.macro[ALL]["R@5"] == 0.5


def test_macro_is_dataset_level():
    # 5 queries with mean 0.2 against 10 queries with mean 0.8; pooling queries would give 0.6
    per_query = {("a", "1"): {"R@5": [0.2] * 5},
                 ("b", "1"): {"R@5": [1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.4, 1.0, 0.6]}}
    rep = macro_average(per_query)
    assert rep.rows[("b", "1")]["R@5"] == pytest.approx(0.8)
    assert rep.macro[ALL]["R@5"] == pytest.approx(0.5)


def test_macro_groups():
    per_query = {("a", "1"): {"m": [1.0]}, ("a", "2"): {"m": [0.0]}, ("b", "1"): {"m": [0.5]}}
    groups = {("a", "1"): SINGLE_MODAL, ("a", "2"): MULTI_MODAL, ("b", "1"): SINGLE_MODAL}
    rep = macro_average(per_query, groups)
    assert rep.macro[SINGLE_MODAL]["m"] == 0.75 and rep.macro[MULTI_MODAL]["m"] == 0.0
    assert rep.macro[ALL]["m"] == 0.5
    with pytest.raises(EmptyGroup):
        macro_average(per_query, groups, required_groups=["Zero-shot"])
    with pytest.raises(EmptyGroup):
        macro_average({})


def test_report_csv_roundtrip():
    rep = macro_average({("a", "1"): {"R@5": [1.0, 0.0, 1.0]}, ("b", "2"): {"R@5": [0.1]}},
                        {("a", "1"): SINGLE_MODAL, ("b", "2"): MULTI_MODAL})
    back = RunReport.from_csv(rep.to_csv())
    assert back.rows == rep.rows and back.macro == rep.macro
    assert "pool: global" in rep.table()
