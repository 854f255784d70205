"""Deterministic signed feature hashing for text and raw image bytes.

Stands in for pretrained encoders so the full pipeline runs without model
weights. Hashing is FNV-1a 64-bit; a token lands in bucket ``h % dim`` with
sign ``+1`` when bit 32 of ``h`` is clear and ``-1`` otherwise.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DataError, DimMismatch, Item, UnimrError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1

WINDOW = 8
STRIDE = 4

# ASCII punctuation/whitespace separates tokens; non-ASCII code points stay inside tokens
_TOKEN_SPLIT = re.compile(r"[\x00-\x2f\x3a-\x40\x5b-\x60\x7b-\x7f]+")
_ASCII_LOWER = str.maketrans("ABCDEFGHIJKLMNOPQRSTUVWXYZ", "abcdefghijklmnopqrstuvwxyz")


class EmptyText(UnimrError):
    pass


class EmptyInput(UnimrError):
    pass


@dataclass(frozen=True)
class FeaturizerConfig:
    F_t: int = 4096
    F_i: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.F_t < 8 or self.F_i < 8:
            raise ValueError(f"feature dims must be >= 8, got F_t={self.F_t}, F_i={self.F_i}")
        if not 0 <= self.seed <= _MASK:
            raise ValueError("seed must fit in u64")

    @property
    def offset_basis(self) -> int:
        # seed 0 gives canonical FNV-1a
        return FNV_OFFSET ^ self.seed


def fnv1a64(data: bytes, basis: int = FNV_OFFSET) -> int:
    h = basis
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK
    return h


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.translate(_ASCII_LOWER)) if t]


def _accumulate(hashes: np.ndarray, dim: int) -> np.ndarray:
    hashes = hashes.astype(np.uint64, copy=False)
    buckets = (hashes % np.uint64(dim)).astype(np.int64)
    signs = np.where((hashes >> np.uint64(32)) & np.uint64(1), -1.0, 1.0)
    out = np.zeros(dim, dtype=np.float64)
    np.add.at(out, buckets, signs)
    return out


def featurize_text_raw(text: str, cfg: FeaturizerConfig) -> np.ndarray:
    """Signed bucket counts before normalization."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText(f"no tokens in {text!r}")
    basis = cfg.offset_basis
    hashes = np.array([fnv1a64(t.encode("utf-8"), basis) for t in tokens], dtype=np.uint64)
    return _accumulate(hashes, cfg.F_t)


def _normalize(raw: np.ndarray, what: str, exc: type[UnimrError]) -> np.ndarray:
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        # signed buckets cancelled out exactly
        raise exc(f"{what} hashed to the zero vector")
    return raw / norm


def featurize_text(text: str, cfg: FeaturizerConfig) -> np.ndarray:
    return _normalize(featurize_text_raw(text, cfg), "text", EmptyText)


def _window_hashes(data: bytes, basis: int) -> np.ndarray:
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size < WINDOW:
        # shorter than one window: hash the whole input once
        return np.array([fnv1a64(data, basis)], dtype=np.uint64)
    starts = np.arange(0, buf.size - WINDOW + 1, STRIDE)
    windows = buf[starts[:, None] + np.arange(WINDOW)[None, :]].astype(np.uint64)
    h = np.full(len(starts), basis, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for j in range(WINDOW):
            h ^= windows[:, j]
            h *= prime
    return h


def featurize_image_bytes(data: bytes, cfg: FeaturizerConfig) -> np.ndarray:
    if not data:
        raise EmptyInput("empty image byte string")
    return _normalize(_accumulate(_window_hashes(bytes(data), cfg.offset_basis), cfg.F_i), "image bytes", EmptyInput)


def load_or_featurize(item: Item, cfg: FeaturizerConfig, base_dir: str | Path | None = None) -> Item:
    """Return ``item`` with ``image_feat`` populated; text-only items pass through."""
    if item.image_feat is not None:
        if item.image_feat.size != cfg.F_i:
            raise DimMismatch(f"{item.id}: image_feat length {item.image_feat.size} != F_i={cfg.F_i}")
        return item
    if item.image_ref is None:
        return item
    path = Path(item.image_ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"{item.id}: image file {path} not found") from None
    try:
        feat = featurize_image_bytes(data, cfg)
    except EmptyInput as exc:
        raise DataError(f"{item.id}: {exc}") from None
    return replace(item, image_feat=feat, image_ref=None)
