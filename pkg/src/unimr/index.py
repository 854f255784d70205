"""Exact inner-product kNN over a (possibly merged) multimodal candidate pool."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import DataError, DimMismatch, DuplicateId, EmbeddingRecord, Modality

STORE_MAGIC = b"UMRE"
STORE_VERSION = 1


@dataclass(frozen=True)
class SearchHit:
    doc_id: str
    score: float  # float32 inner product, stored as a Python float
    rank: int
    modality: Modality


class VectorIndex:
    """Immutable flat index: contiguous float32 rows plus parallel id/modality arrays.

    Results are ordered by float32 score descending, then doc id ascending, so they
    do not depend on insertion order.
    """

    def __init__(self, dim: int, ids: Sequence[str], modalities: Sequence[Modality], vectors: np.ndarray,
                 pool_tag: str = "global"):
        vectors = np.array(vectors, dtype=np.float32, order="C").reshape(len(ids), dim)
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DuplicateId(f"duplicate doc id {dup!r} in pool {pool_tag!r}")
        self.dim = dim
        self.ids = list(ids)
        self.modalities = np.array([int(m) for m in modalities], dtype=np.int8)
        self._vec64 = vectors.astype(np.float64)
        if len(ids) and np.max(np.abs(np.linalg.norm(self._vec64, axis=1) - 1.0)) > 1e-5:
            raise DataError(f"pool {pool_tag!r}: vectors must be unit norm")
        self.vectors = vectors
        self.vectors.flags.writeable = False
        self.pool_tag = pool_tag
        # position of each row in ascending-id order; used as the tie-break key
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._pos = {doc_id: k for k, doc_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def modality_of(self, doc_id: str) -> Modality:
        return Modality(int(self.modalities[self._pos[doc_id]]))

    def vector_of(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._pos[doc_id]]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._pos

    def records(self) -> list[EmbeddingRecord]:
        return [EmbeddingRecord(i, Modality(int(m)), v) for i, m, v in zip(self.ids, self.modalities, self.vectors)]

    def scores(self, query_vecs: np.ndarray) -> np.ndarray:
        """float32-rounded scores, accumulated in float64; shape (n_queries, n_docs)."""
        q = np.atleast_2d(np.asarray(query_vecs, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise DimMismatch(f"query dim {q.shape[1]} != index dim {self.dim}")
        return (q @ self._vec64.T).astype(np.float32)

    def _rank_row(self, scores: np.ndarray, k: int) -> list[SearchHit]:
        n = scores.size
        if n == 0:
            return []
        k = min(k, n)
        if k < n:
            kth = np.partition(scores, n - k)[n - k]
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(n)
        order = cand[np.lexsort((self._id_rank[cand], -scores[cand].astype(np.float64)))][:k]
        return [
            SearchHit(self.ids[j], float(scores[j]), r, Modality(int(self.modalities[j])))
            for r, j in enumerate(order, 1)
        ]

    def search(self, query_vec: np.ndarray, k: int) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
        if q.size != self.dim:
            raise DimMismatch(f"query dim {q.size} != index dim {self.dim}")
        return self._rank_row(self.scores(q)[0], k)

    def search_batch(self, query_vecs: np.ndarray, k: int) -> list[list[SearchHit]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query_vecs, dtype=np.float64)
        if q.size == 0:
            return []
        all_scores = self.scores(q)
        return [self._rank_row(row, k) for row in all_scores]


def build(records: Iterable[EmbeddingRecord], pool_tag: str = "global", dim: int | None = None) -> VectorIndex:
    records = list(records)
    if not records:
        return VectorIndex(dim or 0, [], [], np.zeros((0, dim or 0), dtype=np.float32), pool_tag)
    d = records[0].vector.size
    if dim is not None and dim != d:
        raise DimMismatch(f"records have dim {d}, expected {dim}")
    for r in records:
        if r.vector.size != d:
            raise DimMismatch(f"{r.id}: dim {r.vector.size} != {d}")
    vectors = np.stack([r.vector for r in records])
    return VectorIndex(d, [r.id for r in records], [r.modality for r in records], vectors, pool_tag)


def merge(indexes: Sequence[VectorIndex], pool_tag: str = "global") -> VectorIndex:
    nonempty = [ix for ix in indexes if len(ix)]
    if not nonempty:
        return VectorIndex(indexes[0].dim if indexes else 0, [], [], np.zeros((0, 0), dtype=np.float32), pool_tag)
    dims = {ix.dim for ix in nonempty}
    if len(dims) != 1:
        raise DimMismatch(f"cannot merge indexes with dims {sorted(dims)}")
    ids = [i for ix in nonempty for i in ix.ids]
    mods = [Modality(int(m)) for ix in nonempty for m in ix.modalities]
    return VectorIndex(dims.pop(), ids, mods, np.concatenate([ix.vectors for ix in nonempty]), pool_tag)


def save_store(path: str | Path, records: Sequence[EmbeddingRecord], dim: int | None = None) -> None:
    dim = dim if dim is not None else (records[0].vector.size if records else 0)
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC + struct.pack("<IIQ", STORE_VERSION, dim, len(records)))
        for r in records:
            if r.vector.size != dim:
                raise DimMismatch(f"{r.id}: dim {r.vector.size} != {dim}")
            raw_id = r.id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_id)) + raw_id + bytes([int(r.modality)]))
            fh.write(np.ascontiguousarray(r.vector, dtype="<f4").tobytes())


def load_store(path: str | Path) -> list[EmbeddingRecord]:
    return _read_store(path)[1]


def _read_store(path) -> tuple[int, list[EmbeddingRecord]]:
    blob = Path(path).read_bytes()
    if blob[:4] != STORE_MAGIC:
        raise DataError(f"{path}: not an embedding store")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != STORE_VERSION:
        raise DataError(f"{path}: unsupported store version {version}")
    off = 20
    out = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            doc_id = blob[off:off + n].decode("utf-8")
            off += n
            modality = Modality(blob[off])
            off += 1
            vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).astype(np.float32)
            off += 4 * dim
            out.append(EmbeddingRecord(doc_id, modality, vec))
    except (struct.error, ValueError, IndexError) as exc:
        raise DataError(f"{path}: corrupt store ({exc})") from None
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes in store")
    return dim, out


def load_index(path: str | Path, pool_tag: str = "global") -> VectorIndex:
    dim, records = _read_store(path)
    return build(records, pool_tag, dim=dim)
