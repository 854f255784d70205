"""Modality-aware hard negative mining over a retrieved top-N list.

Two negative classes come out of a ranked list for a query whose task asks for
``desired`` modality:

* ``C1`` - wrong-modality candidates ranked above the labeled positive
  (the whole wrong-modality head when the positive is not retrieved at all);
* ``C2`` - desired-modality candidates ranked strictly below ``k_prime``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DataError, Modality, UnimrError
from .index import SearchHit, VectorIndex


class IndexEmpty(UnimrError):
    pass


class QidMismatch(UnimrError):
    pass


class NegativeClass(str, enum.Enum):
    C1 = "C1"
    C2 = "C2"


@dataclass(frozen=True)
class MinerConfig:
    top_n: int = 50
    k_prime: int = 45

    def __post_init__(self):
        if not 1 <= self.k_prime <= self.top_n:
            raise ValueError(f"need 1 <= k_prime <= top_n, got k_prime={self.k_prime}, top_n={self.top_n}")


@dataclass(frozen=True)
class MinedNegatives:
    qid: str
    C1: tuple[str, ...]
    C2: tuple[str, ...]
    positive_rank: int | None
    # 1-based retrieval rank of every mined id, for persistence
    ranks: Mapping[str, int] = field(default_factory=dict, compare=False, repr=False)

    def to_record(self) -> dict:
        return {
            "qid": self.qid,
            "C1": list(self.C1),
            "C2": list(self.C2),
            "positive_rank": self.positive_rank,
            "ranks": {k: self.ranks[k] for k in (*self.C1, *self.C2) if k in self.ranks},
        }

    @classmethod
    def from_record(cls, raw: Mapping) -> "MinedNegatives":
        return cls(str(raw["qid"]), tuple(raw["C1"]), tuple(raw["C2"]), raw.get("positive_rank"),
                   dict(raw.get("ranks", {})))


def mine_from_hits(qid: str, hits: Sequence[SearchHit], desired: Modality, positive_id: str,
                   cfg: MinerConfig, exclude: Iterable[str] = ()) -> MinedNegatives:
    """Apply both rules to an already ranked list (ranks 1-based, tie rule applied)."""
    hits = hits[: cfg.top_n]
    desired = Modality(desired)
    skip = set(exclude) | {positive_id}
    positive_rank = next((h.rank for h in hits if h.doc_id == positive_id), None)
    c1_limit = positive_rank if positive_rank is not None else cfg.top_n + 1
    c1, c2, ranks = [], [], {}
    for h in hits:
        if h.doc_id in skip:
            continue
        if h.rank < c1_limit and h.modality != desired:
            c1.append(h.doc_id)
            ranks[h.doc_id] = h.rank
        elif h.rank > cfg.k_prime and h.modality == desired:
            c2.append(h.doc_id)
            ranks[h.doc_id] = h.rank
    return MinedNegatives(qid, tuple(c1), tuple(c2), positive_rank, ranks)


def mine(query_vec: np.ndarray, desired_modality: Modality, positive_id: str, index: VectorIndex,
         cfg: MinerConfig = MinerConfig(), qid: str = "", exclude: Iterable[str] = ()) -> MinedNegatives:
    """Retrieve ``top_n`` from ``index`` and split the list into C1/C2 negatives.

    ``exclude`` holds further labeled positives that must never become negatives.
    """
    if len(index) == 0:
        raise IndexEmpty(f"cannot mine {qid or 'query'} against an empty index")
    return mine_from_hits(qid, index.search(query_vec, cfg.top_n), desired_modality, positive_id, cfg, exclude)


def sample_negative(mined: MinedNegatives, rng: np.random.Generator) -> tuple[str, NegativeClass] | None:
    """Draw one negative: pick a class with probability 1/2, then uniformly within it.

    Returns ``None`` when both classes are empty; the example then trains with
    in-batch negatives only.
    """
    pools = [(NegativeClass.C1, mined.C1), (NegativeClass.C2, mined.C2)]
    pools = [(cls, ids) for cls, ids in pools if ids]
    if not pools:
        return None
    cls, ids = pools[int(rng.integers(len(pools)))] if len(pools) == 2 else pools[0]
    return ids[int(rng.integers(len(ids)))], cls


def remine_continual(mined_rand: MinedNegatives, query_vec_hard: np.ndarray, desired_modality: Modality,
                     positive_id: str, index_hard: VectorIndex, cfg: MinerConfig = MinerConfig(),
                     qid: str | None = None, exclude: Iterable[str] = ()) -> MinedNegatives:
    """C2 mined again with the hard-negative model; C1 kept verbatim from the random-negative model."""
    qid = mined_rand.qid if qid is None else qid
    if qid != mined_rand.qid:
        raise QidMismatch(f"re-mining {qid!r} against negatives mined for {mined_rand.qid!r}")
    fresh = mine(query_vec_hard, desired_modality, positive_id, index_hard, cfg, qid, exclude)
    ranks = {k: v for k, v in mined_rand.ranks.items() if k in mined_rand.C1}
    ranks.update({k: fresh.ranks[k] for k in fresh.C2})
    return MinedNegatives(qid, mined_rand.C1, fresh.C2, fresh.positive_rank, ranks)


@dataclass(frozen=True)
class MiningQuery:
    qid: str
    vector: np.ndarray
    desired_modality: Modality
    positive_id: str
    exclude: tuple[str, ...] = ()


@dataclass(frozen=True)
class MiningStats:
    n_queries: int
    mean_c1: float
    mean_c2: float
    frac_positive_missing: float

    @classmethod
    def of(cls, mined: Mapping[str, MinedNegatives]) -> "MiningStats":
        n = len(mined)
        if n == 0:
            return cls(0, 0.0, 0.0, 0.0)
        vals = list(mined.values())
        return cls(
            n,
            sum(len(m.C1) for m in vals) / n,
            sum(len(m.C2) for m in vals) / n,
            sum(m.positive_rank is None for m in vals) / n,
        )


def mine_all(queries: Sequence[MiningQuery], index: VectorIndex,
             cfg: MinerConfig = MinerConfig()) -> tuple[dict[str, MinedNegatives], MiningStats]:
    out: dict[str, MinedNegatives] = {}
    if not queries:
        return out, MiningStats.of(out)
    if len(index) == 0:
        raise IndexEmpty("cannot mine against an empty index")
    ordered = sorted(queries, key=lambda q: q.qid)
    hits = index.search_batch(np.stack([q.vector for q in ordered]), cfg.top_n)
    for q, h in zip(ordered, hits):
        try:
            out[q.qid] = mine_from_hits(q.qid, h, q.desired_modality, q.positive_id, cfg, q.exclude)
        except UnimrError as exc:
            raise type(exc)(f"{q.qid}: {exc}") from None
    return out, MiningStats.of(out)


def save_mined(path: str | Path, mined: Mapping[str, MinedNegatives]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(mined):
            fh.write(json.dumps(mined[qid].to_record()) + "\n")


def load_mined(path: str | Path) -> dict[str, MinedNegatives]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                m = MinedNegatives.from_record(json.loads(line))
                out[m.qid] = m
    return out


@dataclass(frozen=True)
class MinedTriplet:
    qid: str
    positive_id: str
    negative_id: str
    negative_class: NegativeClass
    rank_of_negative: int | None

    def to_record(self) -> dict:
        return {
            "qid": self.qid,
            "positive_id": self.positive_id,
            "negative_id": self.negative_id,
            "negative_class": self.negative_class.value,
            "rank_of_negative": self.rank_of_negative,
        }

    @classmethod
    def from_record(cls, raw: Mapping) -> "MinedTriplet":
        try:
            return cls(str(raw["qid"]), str(raw["positive_id"]), str(raw["negative_id"]),
                       NegativeClass(raw["negative_class"]), raw.get("rank_of_negative"))
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad triplet record: {exc}") from None


def save_triplets(path: str | Path, triplets: Iterable[MinedTriplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_record()) + "\n")


def load_triplets(path: str | Path) -> list[MinedTriplet]:
    with open(path, encoding="utf-8") as fh:
        return [MinedTriplet.from_record(json.loads(line)) for line in fh if line.strip()]
