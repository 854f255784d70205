import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unimr.core import Item, Modality
from unimr.featurizer import FeaturizerConfig
from unimr.fusion import Features, FusionParams, init_params
from unimr.miner import NegativeClass
from unimr.trainer import (
    BatchInfeasible,
    EmptySource,
    Stage,
    TrainConfig,
    TrainExample,
    features_loss,
    grad_check,
    infonce_grad,
    infonce_loss,
    make_batch_mixed,
    make_batches_hard,
    make_batches_rand,
    random_gradcheck_case,
    sample_mixed,
    trace_from_csv,
    train,
)


def softmax_loss_oracle(Q, C, pos, tau):
    total = 0.0
    for q, p in zip(Q, pos):
        s = [sum(a * b for a, b in zip(q, c)) / tau for c in C]
        total += -(s[p] - math.log(sum(math.exp(x) for x in s)))
    return total / len(Q)


# --- loss anchors ---------------------------------------------------------

def test_single_candidate_loss_is_zero():
    assert infonce_loss(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]), [0], 0.05) == 0.0


def test_uniform_scores_give_log_pool_size():
    C = np.tile([1.0, 0.0], (4, 1))
    assert abs(infonce_loss(np.array([[0.3, 0.2]]), C, [2], 0.05) - math.log(4)) < 1e-9


def test_two_dim_worked_example():
    loss = infonce_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), [0], 1.0)
    assert abs(loss - math.log(1 + math.exp(-1))) < 1e-9
    assert abs(loss - 0.3132617) < 1e-7


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 7), st.floats(0.01, 2.0))
@settings(max_examples=60)
def test_loss_matches_oracle_and_is_nonnegative(seed, B, P, tau):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((B, 3))
    C = rng.standard_normal((P, 3))
    pos = rng.integers(P, size=B)
    loss = infonce_loss(Q, C, pos, tau)
    assert loss >= 0.0
    assert loss == pytest.approx(softmax_loss_oracle(Q, C, pos, tau), rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
@settings(max_examples=60)
def test_loss_invariant_to_pool_permutation(seed, P):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((3, 4))
    C = rng.standard_normal((P, 4))
    pos = rng.integers(P, size=3)
    perm = rng.permutation(P)
    inv = np.argsort(perm)
    assert infonce_loss(Q, C[perm], inv[pos], 0.1) == pytest.approx(infonce_loss(Q, C, pos, 0.1), abs=1e-12)


def test_lower_tau_widens_gap_to_uniform():
    # fixed random geometries, positive = most similar candidate; regression check only
    rng = np.random.default_rng(11)
    for _ in range(50):
        Q = rng.standard_normal((1, 6))
        C = rng.standard_normal((5, 6))
        pos = [int(np.argmax(C @ Q[0]))]
        gaps = [math.log(5) - infonce_loss(Q, C, pos, tau) for tau in (2.0, 1.0, 0.5, 0.1, 0.05)]
        assert all(b >= a - 1e-12 for a, b in zip(gaps, gaps[1:]))


# --- gradient -------------------------------------------------------------

def _feats(rng, F, modality):
    def u():
        v = rng.standard_normal(F)
        return v / np.linalg.norm(v)
    return Features(u() if modality.has_text else None, u() if modality.has_image else None)


def test_zero_gradient_single_candidate():
    rng = np.random.default_rng(0)
    p = FusionParams(rng.standard_normal((4, 8)), rng.standard_normal((4, 8)))
    g = infonce_grad([_feats(rng, 8, Modality.IMAGE_TEXT)], [_feats(rng, 8, Modality.TEXT)], [0], p, 0.05)
    assert g.loss == 0.0
    assert not g.W_t.any() and not g.W_i.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params, qf, pf, pos = random_gradcheck_case(rng, d=8, F=16, batch=4)
    rep = grad_check(params, qf, pf, pos, tau=0.05, n_coords=10**6, rng=rng)
    assert rep.n_coords == params.W_t.size + params.W_i.size
    assert rep.max_rel_error < 1e-4


def test_gradient_small_tau_and_init_scale():
    rng = np.random.default_rng(5)
    params, qf, pf, pos = random_gradcheck_case(rng)
    small = params.scaled(0.05)
    assert grad_check(small, qf, pf, pos, tau=0.02, rng=rng).max_rel_error < 1e-4


def test_duplicate_query_rows_count_twice():
    rng = np.random.default_rng(3)
    p = FusionParams(rng.standard_normal((6, 10)), rng.standard_normal((6, 10)))
    q1, q2 = _feats(rng, 10, Modality.IMAGE_TEXT), _feats(rng, 10, Modality.TEXT)
    pool = [_feats(rng, 10, Modality(k % 3)) for k in range(5)]
    g1 = infonce_grad([q1], pool, [1], p, 0.1)
    g2 = infonce_grad([q2], pool, [3], p, 0.1)
    g = infonce_grad([q1, q1, q2], pool, [1, 1, 3], p, 0.1)
    # batch mean of three rows: 3 * grad = 2 * row(q1) + row(q2)
    np.testing.assert_allclose(3 * g.W_t, 2 * g1.W_t + g2.W_t, atol=1e-10)
    np.testing.assert_allclose(3 * g.W_i, 2 * g1.W_i + g2.W_i, atol=1e-10)
    assert 3 * g.loss == pytest.approx(2 * g1.loss + g2.loss, abs=1e-12)


def test_grad_loss_equals_features_loss():
    rng = np.random.default_rng(8)
    params, qf, pf, pos = random_gradcheck_case(rng)
    assert infonce_grad(qf, pf, pos, params, 0.05).loss == pytest.approx(features_loss(qf, pf, pos, params, 0.05),
                                                                      abs=1e-12)


# --- batching -------------------------------------------------------------

def _ex(k, pos, neg=None):
    q = Item(f"q{k}", Modality.TEXT, f"query {k}")
    p = Item(pos, Modality.TEXT, f"doc {pos}")
    n = None if neg is None else Item(neg, Modality.IMAGE_TEXT, f"doc {neg}", np.ones(8) / np.sqrt(8))
    return TrainExample("1", "Find it.", q, p, n, None if n is None else NegativeClass.C1)


def test_rand_batches_full_and_distinct():
    cfg = TrainConfig(batch_size=32)
    batches = make_batches_rand([_ex(k, f"d{k}") for k in range(64)], cfg, np.random.default_rng(0))
    assert len(batches) == 2
    for b in batches:
        ids = [ex.positive.id for ex in b.examples]
        assert len(set(ids)) == 32 and [c.id for c in b.pool] == ids


def test_partial_batch_dropped():
    assert len(make_batches_rand([_ex(k, f"d{k}") for k in range(33)], TrainConfig(batch_size=32),
                                 np.random.default_rng(0))) == 1


def test_shared_positive_infeasible():
    with pytest.raises(BatchInfeasible):
        make_batches_rand([_ex(k, "same") for k in range(10)], TrainConfig(batch_size=2), np.random.default_rng(0))
    with pytest.raises(BatchInfeasible):
        make_batches_hard([_ex(k, "same", f"n{k}") for k in range(10)], TrainConfig(batch_size=2),
                          np.random.default_rng(0))


def test_epoch_tail_ends_early_on_collisions():
    # 20 examples on 4 distinct positives plus 40 unique ones: batches of 8 drain the uniques first
    exs = [_ex(k, f"d{k % 4}") for k in range(20)] + [_ex(100 + k, f"u{k}") for k in range(40)]
    batches = make_batches_rand(exs, TrainConfig(batch_size=8), np.random.default_rng(2))
    assert batches
    for b in batches:
        assert len({ex.positive.id for ex in b.examples}) == 8


def test_hard_batches():
    exs = [_ex(k, f"d{k}", f"n{k % 3}") for k in range(64)]
    batches = make_batches_hard(exs, TrainConfig(batch_size=32), np.random.default_rng(1))
    assert len(batches) == 2
    for b in batches:
        # set oracle: positives first-seen order interleaved with negatives, no repeats
        want, seen = [], set()
        for ex in b.examples:
            for it in (ex.positive, ex.negative):
                if it.id not in seen:
                    seen.add(it.id)
                    want.append(it.id)
        assert [c.id for c in b.pool] == want
        assert [b.pool[i].id for i in b.pos_index] == [ex.positive.id for ex in b.examples]
    assert len(make_batches_hard(exs[:33], TrainConfig(batch_size=32), np.random.default_rng(0))) == 1


def test_negative_that_is_another_positive_is_shared():
    exs = [_ex(0, "a", "b"), _ex(1, "b", "c")]
    (b,) = make_batches_hard(exs, TrainConfig(batch_size=2), np.random.default_rng(0))
    assert sorted(c.id for c in b.pool) == ["a", "b", "c"]


def test_mixed_sampling_frequency():
    A = [_ex(k, f"a{k}") for k in range(7)]
    B = [_ex(100 + k, f"b{k}") for k in range(3)]
    rng = np.random.default_rng(0)
    n = 100_000
    frac_a = sum(sample_mixed(A, B, rng).positive.id.startswith("a") for _ in range(n)) / n
    assert abs(frac_a - 0.5) <= 0.01


def test_mixed_sampling_empty_source():
    with pytest.raises(EmptySource):
        sample_mixed([_ex(0, "a")], [], np.random.default_rng(0))


def test_mixed_single_element_sources():
    rng = np.random.default_rng(3)
    seen = {sample_mixed([_ex(0, "a")], [_ex(1, "b")], rng).positive.id for _ in range(50)}
    assert seen == {"a", "b"}
    b = make_batch_mixed([_ex(0, "a")], [_ex(1, "b")], TrainConfig(batch_size=2), rng)
    assert sorted(c.id for c in b.pool) == ["a", "b"]


# --- training -------------------------------------------------------------

FCFG = FeaturizerConfig(F_t=64, F_i=16)


def two_cluster_examples(n=60):
    words = {0: "apple banana cherry", 1: "xenon yttrium zinc"}
    docs = {c: Item(f"doc{c}", Modality.TEXT, words[c] + " fruit metal") for c in (0, 1)}
    rng = np.random.default_rng(0)
    out = []
    for k in range(n):
        c = k % 2
        w = words[c].split()
        q = Item(f"q{k}", Modality.TEXT, " ".join(rng.choice(w, size=2)))
        out.append(TrainExample("1", "Find the passage.", q, docs[c]))
    return out


def test_lr_zero_keeps_params():
    p0 = init_params(8, FCFG, seed=0)
    res = train(two_cluster_examples(), p0, TrainConfig(lr=0.0, batch_size=2, epochs=1), Stage.RAND, FCFG)
    assert res.params.W_t.tobytes() == p0.W_t.tobytes()
    assert res.params.W_i.tobytes() == p0.W_i.tobytes()


def test_loss_goes_down():
    p0 = init_params(8, FCFG, seed=0)
    res = train(two_cluster_examples(), p0, TrainConfig(lr=1e-2, batch_size=2, epochs=7), Stage.RAND, FCFG)
    losses = np.array([r.loss for r in res.trace[:200]])
    assert len(losses) == 200
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]


def test_same_seed_same_trace():
    p0 = init_params(8, FCFG, seed=0)
    cfg = TrainConfig(lr=1e-2, batch_size=2, epochs=2, seed=4)
    a = train(two_cluster_examples(), p0, cfg, Stage.RAND, FCFG)
    b = train(two_cluster_examples(), p0, cfg, Stage.RAND, FCFG)
    assert a.trace_csv() == b.trace_csv()
    assert a.params == b.params
    assert trace_from_csv(a.trace_csv()) == a.trace


def test_continual_steps_and_sources():
    exs = two_cluster_examples()
    p0 = init_params(8, FCFG, seed=0)
    res = train(exs[:30], p0, TrainConfig(batch_size=2, steps=17), Stage.CONTINUAL, FCFG, exs[30:])
    assert len(res.trace) == 17 and all(r.stage is Stage.CONTINUAL for r in res.trace)
    with pytest.raises(EmptySource):
        train(exs, p0, TrainConfig(batch_size=2), Stage.CONTINUAL, FCFG)


def test_example_validation():
    q = Item("q", Modality.TEXT, "x")
    p = Item("p", Modality.TEXT, "y")
    with pytest.raises(ValueError):
        TrainExample("1", "i", q, p, p, NegativeClass.C2)
    with pytest.raises(ValueError):
        TrainExample("1", "i", q, p, Item("n", Modality.TEXT, "z"), None)
