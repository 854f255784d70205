"""Domain types shared by every module, plus ingestion of the line-delimited formats."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np


class UnimrError(Exception):
    """Base class for every error raised by this package."""


class DataError(UnimrError):
    """Malformed or inconsistent input data."""


class ModalityMismatch(DataError):
    pass


class DuplicateId(DataError):
    pass


class DimMismatch(DataError):
    pass


class NonFinite(UnimrError):
    pass


@enum.unique
class Modality(enum.IntEnum):
    # integer values fix the total order and the binary store byte
    TEXT = 0
    IMAGE = 1
    IMAGE_TEXT = 2

    @property
    def tag(self) -> str:
        return _MODALITY_TAGS[self]

    @classmethod
    def parse(cls, tag: str | int | "Modality") -> "Modality":
        if isinstance(tag, Modality):
            return tag
        if isinstance(tag, int):
            return cls(tag)
        key = tag.strip().lower().replace(" ", "")
        try:
            return _TAG_LOOKUP[key]
        except KeyError:
            raise DataError(f"unknown modality tag {tag!r}") from None

    @property
    def has_text(self) -> bool:
        return self is not Modality.IMAGE

    @property
    def has_image(self) -> bool:
        return self is not Modality.TEXT


_MODALITY_TAGS = {Modality.TEXT: "text", Modality.IMAGE: "image", Modality.IMAGE_TEXT: "image,text"}
_TAG_LOOKUP = {
    "text": Modality.TEXT,
    "txt": Modality.TEXT,
    "image": Modality.IMAGE,
    "img": Modality.IMAGE,
    "image,text": Modality.IMAGE_TEXT,
    "text,image": Modality.IMAGE_TEXT,
}


class Metric(str, enum.Enum):
    RECALL_AT_5 = "RecallAt5"
    RECALL_AT_10 = "RecallAt10"
    NDCG_AT_10 = "NDCGAt10"
    MAP_AT_5 = "MAPAt5"

    @property
    def short(self) -> str:
        return {"RecallAt5": "R@5", "RecallAt10": "R@10", "NDCGAt10": "nDCG@10", "MAPAt5": "mAP@5"}[self.value]


_WS = re.compile(r"\s+")


def canonical_text(text: str) -> str:
    return _WS.sub(" ", text).strip()


def _freeze(vec) -> np.ndarray:
    arr = np.array(vec, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Item:
    """A query or candidate: optional text, optional image features or image path."""

    id: str
    modality: Modality
    text: str | None = None
    image_feat: np.ndarray | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if self.image_feat is not None:
            object.__setattr__(self, "image_feat", _freeze(self.image_feat))

    @property
    def has_image(self) -> bool:
        return self.image_feat is not None or self.image_ref is not None

    def to_record(self) -> dict:
        rec: dict = {"id": self.id, "modality": self.modality.tag}
        if self.text is not None:
            rec["txt"] = self.text
        if self.image_feat is not None:
            rec["img_feat"] = self.image_feat.tolist()
        if self.image_ref is not None:
            rec["img_ref"] = self.image_ref
        return rec

    def __eq__(self, other):
        if not isinstance(other, Item):
            return NotImplemented
        if (self.id, self.modality, self.text, self.image_ref) != (
            other.id, other.modality, other.text, other.image_ref
        ):
            return False
        if (self.image_feat is None) != (other.image_feat is None):
            return False
        return self.image_feat is None or np.array_equal(self.image_feat, other.image_feat)

    def __hash__(self):
        return hash((self.id, self.modality, self.text, self.image_ref))


def infer_modality(has_text: bool, has_image: bool) -> Modality:
    if has_text and has_image:
        return Modality.IMAGE_TEXT
    if has_image:
        return Modality.IMAGE
    if has_text:
        return Modality.TEXT
    raise ModalityMismatch("record has neither text nor image")


def validate_item(raw: Mapping) -> Item:
    """Build an :class:`Item` from one parsed ingestion record.

    Accepts ``id`` or ``qid`` as the identifier and infers the modality from the
    populated fields when no ``modality`` tag is present (query files carry none).
    """
    item_id = raw.get("id", raw.get("qid"))
    if item_id is None or str(item_id) == "":
        raise DataError("record has no id")
    item_id = str(item_id)

    text = raw.get("txt", raw.get("text"))
    if text is not None:
        text = canonical_text(str(text))
        if not text:
            text = None
    feat = raw.get("img_feat", raw.get("image_feat"))
    ref = raw.get("img_ref", raw.get("image_ref"))
    if ref is not None and str(ref) == "":
        ref = None
    if feat is not None and ref is not None:
        raise ModalityMismatch(f"{item_id}: both img_feat and img_ref set")
    has_image = feat is not None or ref is not None

    tag = raw.get("modality")
    modality = infer_modality(text is not None, has_image) if tag is None else Modality.parse(tag)
    if modality.has_text != (text is not None) or modality.has_image != has_image:
        raise ModalityMismatch(
            f"{item_id}: fields (text={text is not None}, image={has_image}) inconsistent with modality {modality.tag!r}"
        )
    if feat is not None:
        feat = _freeze(feat)
        if feat.size == 0 or not np.all(np.isfinite(feat)):
            raise DataError(f"{item_id}: img_feat empty or non-finite")
    return Item(item_id, modality, text, feat, None if ref is None else str(ref))


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    dataset_id: str
    instruction: str
    desired_modality: Modality
    metric: Metric = Metric.RECALL_AT_5

    def __post_init__(self):
        if not self.instruction.strip():
            raise DataError(f"task {self.task_id}: empty instruction")

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "dataset_id": self.dataset_id,
            "instruction": self.instruction,
            "desired_modality": self.desired_modality.tag,
            "metric": self.metric.value,
        }

    @classmethod
    def from_record(cls, raw: Mapping) -> "TaskSpec":
        try:
            return cls(
                str(raw["task_id"]),
                str(raw["dataset_id"]),
                canonical_text(str(raw["instruction"])),
                Modality.parse(raw["desired_modality"]),
                Metric(raw.get("metric", "RecallAt5")),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad task record {dict(raw)!r}: {exc}") from None


@dataclass(frozen=True, eq=False)
class Query:
    """A query item bound to its task, with the labeled positives from the query file."""

    item: Item
    task_id: str
    pos_ids: tuple[str, ...] = ()
    split: str = "test"

    @property
    def qid(self) -> str:
        return self.item.id

    def to_record(self) -> dict:
        rec = self.item.to_record()
        rec["qid"] = rec.pop("id")
        del rec["modality"]
        rec["task_id"] = self.task_id
        rec["pos_ids"] = list(self.pos_ids)
        rec["split"] = self.split
        return rec

    @classmethod
    def from_record(cls, raw: Mapping) -> "Query":
        item = validate_item(raw)
        if "task_id" not in raw:
            raise DataError(f"query {item.id}: missing task_id")
        return cls(item, str(raw["task_id"]), tuple(str(p) for p in raw.get("pos_ids", ())), str(raw.get("split", "test")))

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (self.item, self.task_id, self.pos_ids, self.split) == (other.item, other.task_id, other.pos_ids, other.split)

    __hash__ = None


@dataclass(frozen=True)
class Qrels:
    """Graded judgments: qid -> {doc_id: grade}."""

    judgments: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for qid, docs in self.judgments.items():
            if any(g < 0 for g in docs.values()):
                raise DataError(f"qrels {qid}: negative grade")
            if not any(g > 0 for g in docs.values()):
                raise DataError(f"qrels {qid}: no positive grade")

    def relevant(self, qid: str) -> set[str]:
        return {d for d, g in self.judgments.get(qid, {}).items() if g > 0}

    def grades(self, qid: str) -> dict[str, int]:
        return dict(self.judgments.get(qid, {}))

    def grade(self, qid: str, doc_id: str) -> int:
        return self.judgments.get(qid, {}).get(doc_id, 0)

    def check_pool(self, pool_ids: Iterable[str]) -> None:
        pool = set(pool_ids)
        for qid, docs in self.judgments.items():
            missing = [d for d in docs if d not in pool]
            if missing:
                raise DataError(f"qrels {qid}: unknown doc ids {missing[:3]}")

    @classmethod
    def from_queries(cls, queries: Iterable[Query]) -> "Qrels":
        return cls({q.qid: {p: 1 for p in q.pos_ids} for q in queries if q.pos_ids})


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    modality: Modality
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if abs(float(np.linalg.norm(vec.astype(np.float64))) - 1.0) > 1e-5:
            raise DataError(f"embedding {self.id}: vector not unit norm")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (self.id, self.modality) == (other.id, other.modality) and np.array_equal(self.vector, other.vector)

    __hash__ = None


# ---------------------------------------------------------------------------
# line-delimited IO


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def _unique(items, key, what):
    seen = set()
    for it in items:
        k = key(it)
        if k in seen:
            raise DuplicateId(f"duplicate {what} id {k!r}")
        seen.add(k)
    return items


def load_corpus(path: str | Path) -> list[Item]:
    items = []
    for lineno, raw in enumerate(read_jsonl(path), 1):
        if "modality" not in raw:
            raise DataError(f"{path}:{lineno}: corpus record without modality")
        try:
            items.append(validate_item(raw))
        except DataError as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from None
    return _unique(items, lambda it: it.id, "corpus")


def load_queries(path: str | Path) -> list[Query]:
    return _unique([Query.from_record(r) for r in read_jsonl(path)], lambda q: q.qid, "query")


def load_tasks(path: str | Path) -> dict[str, TaskSpec]:
    tasks = [TaskSpec.from_record(r) for r in read_jsonl(path)]
    _unique(tasks, lambda t: t.task_id, "task")
    return {t.task_id: t for t in tasks}


def save_corpus(path, items: Iterable[Item]) -> None:
    write_jsonl(path, (it.to_record() for it in items))


def save_queries(path, queries: Iterable[Query]) -> None:
    write_jsonl(path, (q.to_record() for q in queries))


def save_tasks(path, tasks: Iterable[TaskSpec]) -> None:
    write_jsonl(path, (t.to_record() for t in tasks))


def load_qrels(path: str | Path) -> Qrels:
    judgments: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'qid 0 doc_id grade'")
            qid, _, doc_id, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise DataError(f"{path}:{lineno}: grade {grade!r} not an integer") from None
            judgments.setdefault(qid, {})[doc_id] = g
    return Qrels(judgments)


def save_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, docs in qrels.judgments.items():
            for doc_id, g in docs.items():
                fh.write(f"{qid} 0 {doc_id} {g}\n")
