"""Synthetic universal-retrieval benchmark with wrong-modality look-alikes.

Every cluster is one "concept" rendered in each modality: a passage, an image
(a byte string hashed by the featurizer), and an image with a caption. Queries
cover the eight query/candidate modality pairings, and each is labeled with the
cluster's candidate of the instructed modality. Same-cluster candidates of the
other modalities share the concept vocabulary or image bytes, so a retriever
that ignores the instruction ranks them at the top.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Item, Metric, Modality, Qrels, Query, TaskSpec, save_corpus, save_qrels, save_queries, save_tasks

DATASET_ID = "synth"

# (task id, query modality, candidate modality, instruction)
TASK_TYPES = (
    ("1", Modality.TEXT, Modality.IMAGE, "Retrieve an image that matches the given caption."),
    ("2", Modality.TEXT, Modality.TEXT, "Retrieve a passage that answers the given question."),
    ("3", Modality.TEXT, Modality.IMAGE_TEXT, "Retrieve an image with its caption that matches the description."),
    ("4", Modality.IMAGE, Modality.TEXT, "Find a caption that describes the given image."),
    ("5", Modality.IMAGE, Modality.IMAGE, "Find an image that looks similar to the given image."),
    ("6", Modality.IMAGE_TEXT, Modality.TEXT, "Retrieve a passage that answers the question about the image."),
    ("7", Modality.IMAGE_TEXT, Modality.IMAGE, "Find an image like the reference image with the requested change."),
    ("8", Modality.IMAGE_TEXT, Modality.IMAGE_TEXT,
     "Retrieve an image with its caption that answers the question about the image."),
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    n_clusters: int = 150
    docs_per_cluster: dict = field(default_factory=lambda: {"text": 1, "image": 1, "image,text": 1})
    n_queries: int = 4  # per task per cluster
    modality_confound_strength: float = 0.9
    seed: int = 0
    test_fraction: float = 0.25
    topic_words: int = 10
    filler_words: int = 60
    image_bytes: int = 256
    image_noise: float = 0.1  # fraction of 4-byte blocks re-drawn per image instance

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_queries < 1:
            raise ValueError("n_clusters and n_queries must be >= 1")
        counts = {Modality.parse(k): int(v) for k, v in self.docs_per_cluster.items()}
        if any(v < 1 for v in counts.values()) or set(counts) != set(Modality):
            raise ValueError("docs_per_cluster needs a count >= 1 for text, image and image,text")
        if not 0.0 <= self.modality_confound_strength <= 1.0:
            raise ValueError("modality_confound_strength must lie in [0, 1]")

    @property
    def counts(self) -> dict[Modality, int]:
        return {Modality.parse(k): int(v) for k, v in self.docs_per_cluster.items()}


@dataclass
class SynthData:
    corpus: list[Item]
    queries: list[Query]
    tasks: list[TaskSpec]
    qrels: Qrels
    images: dict[str, bytes]  # relative path -> bytes


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _pick(rng, words, n):
    return [words[k] for k in rng.choice(len(words), size=min(n, len(words)), replace=False)]


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    taken: set[str] = set()
    filler = _pseudo_words(rng, spec.filler_words, taken)
    s = spec.modality_confound_strength
    n_blocks = spec.image_bytes // 4

    def noisy(proto: np.ndarray) -> bytes:
        img = proto.copy().reshape(n_blocks, 4)
        redraw = rng.random(n_blocks) < spec.image_noise
        img[redraw] = rng.integers(0, 256, size=(int(redraw.sum()), 4), dtype=np.uint8)
        return img.tobytes()

    corpus: list[Item] = []
    images: dict[str, bytes] = {}
    docs_by: dict[tuple[int, Modality], list[str]] = {}
    clusters = []
    for c in range(spec.n_clusters):
        topic = _pseudo_words(rng, spec.topic_words, taken)
        detail = _pseudo_words(rng, spec.topic_words, taken)
        proto = rng.integers(0, 256, size=spec.image_bytes, dtype=np.uint8)
        clusters.append((topic, detail, proto))
        for modality, count in sorted(spec.counts.items()):
            for j in range(count):
                doc_id = f"c{c:03d}-{('txt', 'img', 'imgtxt')[modality]}{j}"
                text = ref = None
                if modality.has_text:
                    # the confound knob sets how much of a passage/caption reuses query vocabulary
                    n_words = 8
                    n_topic = int(round(s * n_words))
                    words = _pick(rng, topic, n_topic) + _pick(rng, detail, n_words - n_topic) + _pick(rng, filler, 2)
                    text = " ".join(rng.permutation(words))
                if modality.has_image:
                    ref = f"images/{doc_id}.bin"
                    images[ref] = noisy(proto)
                corpus.append(Item(doc_id, modality, text, None, ref))
                docs_by.setdefault((c, modality), []).append(doc_id)

    tasks = [
        TaskSpec(tid, DATASET_ID, inst, cand, Metric.RECALL_AT_5)
        for tid, _, cand, inst in TASK_TYPES
    ]
    queries: list[Query] = []
    n_test = int(round(spec.n_queries * spec.test_fraction))
    for c, (topic, _, proto) in enumerate(clusters):
        for tid, qmod, cmod, _ in TASK_TYPES:
            for j in range(spec.n_queries):
                qid = f"q{c:03d}-t{tid}-{j}"
                text = ref = None
                if qmod.has_text:
                    text = " ".join(rng.permutation(_pick(rng, topic, 4) + _pick(rng, filler, 2)))
                if qmod.has_image:
                    ref = f"images/{qid}.bin"
                    images[ref] = noisy(proto)
                pool = docs_by[(c, cmod)]
                pos = pool[int(rng.integers(len(pool)))]
                split = "test" if j >= spec.n_queries - n_test else "train"
                queries.append(Query(Item(qid, qmod, text, None, ref), tid, (pos,), split))
    return SynthData(corpus, queries, tasks, Qrels.from_queries(queries), images)


def write(data: SynthData, outdir: str | Path) -> dict[str, Path]:
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rel, blob in sorted(data.images.items()):
        (out / rel).write_bytes(blob)
    paths = {
        "corpus": out / "corpus.jsonl",
        "queries": out / "queries.jsonl",
        "tasks": out / "tasks.jsonl",
        "qrels": out / "qrels.txt",
    }
    save_corpus(paths["corpus"], data.corpus)
    save_queries(paths["queries"], data.queries)
    save_tasks(paths["tasks"], data.tasks)
    save_qrels(paths["qrels"], data.qrels)
    return paths


def cmd_synth(spec: SynthSpec, outdir: str | Path) -> dict[str, Path]:
    return write(generate(spec), outdir)
