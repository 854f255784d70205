"""Zero-shot pointwise reranking from True/False token logits.

Each (query, candidate) pair in the retrieval head is rendered into a yes/no
prompt, a scorer returns the logits of the "True" and "False" tokens, and the
relevance score is the softmax probability of "True".
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .core import Item, Modality, NonFinite, Qrels, UnimrError
from .index import SearchHit


class TemplateMismatch(UnimrError):
    pass


class MissingField(UnimrError):
    pass


class ScorerUnavailable(UnimrError):
    pass


_PLACEHOLDER = re.compile(r"\{(qry_img|qry_txt|doc_img|doc_txt|qry|doc)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    query_modality: Modality | None
    candidate_modality: Modality | None
    body: str
    dataset_id: str | None = None

    def __post_init__(self):
        if not self.body.rstrip().endswith("True or False"):
            raise ValueError(f"template {self.template_id}: body must end with a True/False question")
        for name in self.placeholders:
            side = self.query_modality if name.startswith("qry") else self.candidate_modality
            if side is None or name in ("qry", "doc"):
                continue
            if name.endswith("img") and not side.has_image or name.endswith("txt") and not side.has_text:
                raise ValueError(f"template {self.template_id}: {{{name}}} incompatible with {side.tag}")

    @property
    def placeholders(self) -> list[str]:
        return _PLACEHOLDER.findall(self.body)

    def applies(self, query: Modality, candidate: Modality, dataset_id: str | None = None) -> bool:
        return ((self.query_modality is None or self.query_modality == query)
                and (self.candidate_modality is None or self.candidate_modality == candidate)
                and (self.dataset_id is None or self.dataset_id == dataset_id))

    def specificity(self) -> int:
        return sum(x is not None for x in (self.query_modality, self.candidate_modality, self.dataset_id))


CAPTION_TEMPLATE = PromptTemplate(
    "image_caption",
    Modality.IMAGE,
    Modality.TEXT,
    "{qry_img}\nCaption:{doc_txt}\nDoes the above daily life image match the caption? True or False",
)
VQA_TEMPLATE = PromptTemplate(
    "visual_qa",
    Modality.IMAGE_TEXT,
    Modality.TEXT,
    "{qry_img}\nQuestion:{qry_txt}\nAnswer:{doc_txt}\nDoes the answer correctly answer the question? True or False",
)
GENERIC_TEMPLATE = PromptTemplate(
    "generic",
    None,
    None,
    "Query:{qry}\nCandidate:{doc}\nDoes the candidate satisfy the query? True or False",
)
DEFAULT_TEMPLATES = (CAPTION_TEMPLATE, VQA_TEMPLATE, GENERIC_TEMPLATE)


def image_marker(item: Item) -> str:
    return f"<img:{item.id}>"


def _field(name: str, query: Item, candidate: Item) -> str:
    item = query if name.startswith("qry") else candidate
    if name in ("qry", "doc"):
        parts = []
        if item.has_image:
            parts.append(image_marker(item))
        if item.text is not None:
            parts.append(item.text)
        return "\n".join(parts)
    if name.endswith("img"):
        if not item.has_image:
            raise MissingField(f"{item.id}: template needs an image")
        return image_marker(item)
    if item.text is None:
        raise MissingField(f"{item.id}: template needs text")
    return item.text


def render_prompt(template: PromptTemplate, query: Item, candidate: Item, dataset_id: str | None = None) -> str:
    if not template.applies(query.modality, candidate.modality, dataset_id):
        raise TemplateMismatch(
            f"template {template.template_id} does not apply to {query.modality.tag} -> {candidate.modality.tag}"
        )
    return _PLACEHOLDER.sub(lambda m: _field(m.group(1), query, candidate), template.body)


def select_template(templates: Sequence[PromptTemplate], query: Modality, candidate: Modality,
                    dataset_id: str | None = None) -> PromptTemplate:
    matching = [t for t in templates if t.applies(query, candidate, dataset_id)]
    if not matching:
        raise TemplateMismatch(f"no template for {query.tag} -> {candidate.tag}")
    # most specific wins; registry order breaks ties
    return max(matching, key=lambda t: t.specificity())


def image_refs(query: Item, candidate: Item) -> list[str]:
    refs = []
    for item in (query, candidate):
        if item.has_image:
            refs.append(item.image_ref if item.image_ref is not None else item.id)
    return refs


# ---------------------------------------------------------------------------
# scorers


@dataclass(frozen=True)
class ScorerResponse:
    logit_true: float
    logit_false: float

    def __post_init__(self):
        if not (math.isfinite(self.logit_true) and math.isfinite(self.logit_false)):
            raise NonFinite("scorer returned non-finite logits")


@dataclass(frozen=True)
class ScorerRequest:
    prompt: str
    image_refs: tuple[str, ...]
    qid: str = ""
    doc_id: str = ""

    def cache_key(self) -> str:
        payload = json.dumps([self.prompt, list(self.image_refs)], ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Scorer(Protocol):
    def __call__(self, request: ScorerRequest) -> ScorerResponse: ...


def true_prob(resp: ScorerResponse) -> float:
    """Softmax probability of "True" over the two logits, computed as sigmoid(lt - lf)."""
    if not (math.isfinite(resp.logit_true) and math.isfinite(resp.logit_false)):
        raise NonFinite("non-finite logits")
    x = resp.logit_true - resp.logit_false
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def mock_scorer(query: Item, candidate: Item, oracle_qrels: Qrels) -> ScorerResponse:
    relevant = oracle_qrels.grade(query.id, candidate.id) > 0
    return ScorerResponse(10.0 if relevant else -10.0, 0.0)


class MockScorer:
    """Deterministic oracle scorer: +10 logit for judged-relevant pairs, -10 otherwise."""

    def __init__(self, qrels: Qrels):
        self.qrels = qrels

    def __call__(self, request: ScorerRequest) -> ScorerResponse:
        relevant = self.qrels.grade(request.qid, request.doc_id) > 0
        return ScorerResponse(10.0 if relevant else -10.0, 0.0)


class HttpScorer:
    """Posts ``{"prompt", "image_refs"}`` as one JSON line; expects ``{"logit_true", "logit_false"}`` back."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep

    def _once(self, request: ScorerRequest) -> ScorerResponse:
        body = json.dumps({"prompt": request.prompt, "image_refs": list(request.image_refs)}) + "\n"
        req = urllib.request.Request(self.url, data=body.encode("utf-8"),
                                     headers={"Content-Type": "application/x-ndjson"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            line = resp.read().decode("utf-8").strip().splitlines()[0]
        rec = json.loads(line)
        return ScorerResponse(float(rec["logit_true"]), float(rec["logit_false"]))

    def __call__(self, request: ScorerRequest) -> ScorerResponse:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                return self._once(request)
            except (urllib.error.URLError, OSError, ValueError, KeyError, IndexError) as exc:
                last = exc
                if attempt < self.retries:
                    self._sleep(self.backoff * 2 ** attempt)
        raise ScorerUnavailable(f"{self.url}: {last}")


class CachedScorer:
    """Wraps a scorer with an append-only JSONL cache keyed by (prompt, image refs)."""

    def __init__(self, inner: Scorer, path: str | Path | None = None):
        self.inner = inner
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._memo: dict[str, ScorerResponse] = {}
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._memo[rec["key_hash"]] = ScorerResponse(rec["logit_true"], rec["logit_false"])

    def __call__(self, request: ScorerRequest) -> ScorerResponse:
        key = request.cache_key()
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        resp = self.inner(request)
        with self._lock:
            if key not in self._memo:
                self._memo[key] = resp
                if self.path is not None:
                    with open(self.path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"key_hash": key, "logit_true": resp.logit_true,
                                             "logit_false": resp.logit_false}) + "\n")
        return resp


# ---------------------------------------------------------------------------
# reranking


@dataclass(frozen=True)
class RerankConfig:
    depth: int = 10
    scorer: str = "mock"  # "mock" or an http(s) URL
    max_in_flight: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def rerank(query: Item, hits: Sequence[SearchHit], candidates: Mapping[str, Item], scorer: Scorer,
           cfg: RerankConfig = RerankConfig(), templates: Sequence[PromptTemplate] = DEFAULT_TEMPLATES,
           dataset_id: str | None = None) -> list[SearchHit]:
    """Rescore the first ``depth`` hits by P(True) and re-sort them; leave the tail as is.

    The head is ordered by probability descending with the original retrieval rank
    as the tie-break. Returned hits carry their new rank; head scores are the
    probabilities, tail scores the untouched retrieval scores.
    """
    head, tail = list(hits[: cfg.depth]), list(hits[cfg.depth:])
    requests = []
    for h in head:
        cand = candidates[h.doc_id]
        tpl = select_template(templates, query.modality, cand.modality, dataset_id)
        requests.append(ScorerRequest(render_prompt(tpl, query, cand, dataset_id),
                                      tuple(image_refs(query, cand)), query.id, cand.id))
    try:
        if cfg.max_in_flight > 1 and len(requests) > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
                responses = list(pool.map(scorer, requests))
        else:
            responses = [scorer(r) for r in requests]
    except ScorerUnavailable as exc:
        raise ScorerUnavailable(f"{query.id}: {exc}") from None
    probs = [true_prob(r) for r in responses]
    order = sorted(range(len(head)), key=lambda k: (-probs[k], k))
    out = [replace(head[k], score=probs[k], rank=r) for r, k in enumerate(order, 1)]
    return out + tail
