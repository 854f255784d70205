"""Score-fusion bi-encoder: separately projected text and image features, summed and normalized."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, DimMismatch, EmbeddingRecord, Item, NonFinite, UnimrError
from .featurizer import FeaturizerConfig, featurize_text

ZERO_NORM = 1e-12
CHECKPOINT_MAGIC = b"UMRP"
CHECKPOINT_VERSION = 1


class ZeroVector(UnimrError):
    def __init__(self, msg: str, row: int | None = None):
        super().__init__(msg)
        self.row = row


@dataclass(frozen=True, eq=False)
class FusionParams:
    W_t: np.ndarray  # d x F_t
    W_i: np.ndarray  # d x F_i

    def __post_init__(self):
        W_t = np.asarray(self.W_t, dtype=np.float64)
        W_i = np.asarray(self.W_i, dtype=np.float64)
        if W_t.ndim != 2 or W_i.ndim != 2 or W_t.shape[0] != W_i.shape[0]:
            raise DimMismatch(f"projection shapes {W_t.shape} and {W_i.shape} disagree on d")
        if not (np.all(np.isfinite(W_t)) and np.all(np.isfinite(W_i))):
            raise NonFinite("projection matrices contain NaN/Inf")
        object.__setattr__(self, "W_t", W_t)
        object.__setattr__(self, "W_i", W_i)

    @property
    def d(self) -> int:
        return self.W_t.shape[0]

    @property
    def F_t(self) -> int:
        return self.W_t.shape[1]

    @property
    def F_i(self) -> int:
        return self.W_i.shape[1]

    def featurizer(self, seed: int = 0) -> FeaturizerConfig:
        return FeaturizerConfig(self.F_t, self.F_i, seed)

    def scaled(self, lam: float) -> "FusionParams":
        return FusionParams(self.W_t * lam, self.W_i * lam)

    def copy(self) -> "FusionParams":
        return FusionParams(self.W_t.copy(), self.W_i.copy())

    def __eq__(self, other):
        if not isinstance(other, FusionParams):
            return NotImplemented
        return np.array_equal(self.W_t, other.W_t) and np.array_equal(self.W_i, other.W_i)

    __hash__ = None


@dataclass(frozen=True)
class EncodeOptions:
    include_instruction: bool = True


def init_params(d: int, fcfg: FeaturizerConfig, seed: int) -> FusionParams:
    """Uniform(-a, a) with a = sqrt(6 / (d + F)) for each projection."""
    rng = np.random.default_rng(seed)
    a_t = np.sqrt(6.0 / (d + fcfg.F_t))
    a_i = np.sqrt(6.0 / (d + fcfg.F_i))
    W_t = rng.uniform(-a_t, a_t, size=(d, fcfg.F_t))
    W_i = rng.uniform(-a_i, a_i, size=(d, fcfg.F_i))
    return FusionParams(W_t, W_i)


@dataclass(frozen=True, eq=False)
class Features:
    """Unit-norm input features for one side of a pair; either part may be absent."""

    text: np.ndarray | None
    image: np.ndarray | None


def query_text(inst: str, q: Item, include_instruction: bool) -> str | None:
    if not include_instruction:
        return q.text
    if q.text is None:
        return inst
    return f"{inst} {q.text}"


def _image_part(item: Item, fcfg: FeaturizerConfig) -> np.ndarray | None:
    if not item.modality.has_image:
        return None
    if item.image_feat is None:
        raise DataError(f"{item.id}: image not featurized (call load_or_featurize first)")
    if item.image_feat.size != fcfg.F_i:
        raise DimMismatch(f"{item.id}: image_feat length {item.image_feat.size} != F_i={fcfg.F_i}")
    return item.image_feat


def query_features(inst: str, q: Item, fcfg: FeaturizerConfig, opts: EncodeOptions = EncodeOptions()) -> Features:
    text = query_text(inst, q, opts.include_instruction)
    return Features(None if text is None else featurize_text(text, fcfg), _image_part(q, fcfg))


def candidate_features(c: Item, fcfg: FeaturizerConfig) -> Features:
    return Features(None if c.text is None else featurize_text(c.text, fcfg), _image_part(c, fcfg))


def project(params: FusionParams, feats: Features) -> np.ndarray:
    raw = np.zeros(params.d)
    if feats.text is not None:
        raw = raw + params.W_t @ feats.text
    if feats.image is not None:
        raw = raw + params.W_i @ feats.image
    return raw


def _unit(raw: np.ndarray, who: str) -> np.ndarray:
    norm = float(np.linalg.norm(raw))
    if not np.isfinite(norm):
        raise NonFinite(f"{who}: non-finite embedding")
    if norm < ZERO_NORM:
        raise ZeroVector(f"{who}: projected vector has norm {norm:.3g}")
    return raw / norm


def _check_dims(params: FusionParams, fcfg: FeaturizerConfig | None) -> FeaturizerConfig:
    if fcfg is None:
        return params.featurizer()
    if (fcfg.F_t, fcfg.F_i) != (params.F_t, params.F_i):
        raise DimMismatch(f"featurizer dims ({fcfg.F_t}, {fcfg.F_i}) != params ({params.F_t}, {params.F_i})")
    return fcfg


def encode_query(inst: str, q: Item, params: FusionParams, opts: EncodeOptions = EncodeOptions(),
                 fcfg: FeaturizerConfig | None = None) -> np.ndarray:
    fcfg = _check_dims(params, fcfg)
    return _unit(project(params, query_features(inst, q, fcfg, opts)), q.id)


def encode_candidate(c: Item, params: FusionParams, fcfg: FeaturizerConfig | None = None) -> np.ndarray:
    fcfg = _check_dims(params, fcfg)
    return _unit(project(params, candidate_features(c, fcfg)), c.id)


def encode_features(params: FusionParams, feats: Sequence[Features]) -> tuple[np.ndarray, np.ndarray]:
    """Batch projection. Returns (raw n x d, unit n x d)."""
    n = len(feats)
    raw = np.zeros((n, params.d))
    rows_t = [k for k, f in enumerate(feats) if f.text is not None]
    rows_i = [k for k, f in enumerate(feats) if f.image is not None]
    if rows_t:
        raw[rows_t] += np.stack([feats[k].text for k in rows_t]) @ params.W_t.T
    if rows_i:
        raw[rows_i] += np.stack([feats[k].image for k in rows_i]) @ params.W_i.T
    norms = np.linalg.norm(raw, axis=1)
    if not np.all(np.isfinite(norms)):
        raise NonFinite("non-finite embedding in batch")
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(f"row {int(bad[0])}: projected vector has norm {norms[bad[0]]:.3g}", row=int(bad[0]))
    return raw, raw / norms[:, None]


def encode_corpus(items: Sequence[Item], params: FusionParams, fcfg: FeaturizerConfig | None = None) -> list[EmbeddingRecord]:
    fcfg = _check_dims(params, fcfg)
    if not items:
        return []
    feats = [candidate_features(it, fcfg) for it in items]
    try:
        _, unit = encode_features(params, feats)
    except ZeroVector as exc:
        raise ZeroVector(f"{items[exc.row].id}: projected vector is zero", row=exc.row) from None
    return [EmbeddingRecord(it.id, it.modality, v.astype(np.float32)) for it, v in zip(items, unit)]


def encode_queries(pairs: Sequence[tuple[str, Item]], params: FusionParams, opts: EncodeOptions = EncodeOptions(),
                   fcfg: FeaturizerConfig | None = None) -> np.ndarray:
    """Encode (instruction, query) pairs into an n x d float64 matrix."""
    fcfg = _check_dims(params, fcfg)
    if not pairs:
        return np.zeros((0, params.d))
    feats = [query_features(inst, q, fcfg, opts) for inst, q in pairs]
    return encode_features(params, feats)[1]


def save_params(path: str | Path, params: FusionParams) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<IIII", CHECKPOINT_VERSION, params.d, params.F_t, params.F_i)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(params.W_t, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.W_i, dtype="<f8").tobytes())


def load_params(path: str | Path) -> FusionParams:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a params checkpoint")
    version, d, F_t, F_i = struct.unpack_from("<IIII", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    n_t, n_i = d * F_t * 8, d * F_i * 8
    if len(blob) != off + n_t + n_i:
        raise DataError(f"{path}: truncated checkpoint")
    W_t = np.frombuffer(blob, dtype="<f8", count=d * F_t, offset=off).reshape(d, F_t).astype(np.float64)
    W_i = np.frombuffer(blob, dtype="<f8", count=d * F_i, offset=off + n_t).reshape(d, F_i).astype(np.float64)
    return FusionParams(W_t, W_i)
