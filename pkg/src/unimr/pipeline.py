"""End-to-end orchestration: featurize, three training stages, mining, retrieval, reranking, evaluation.

Every intermediate artifact is written under the work directory with a
stage-tagged name (``params_rand.umrp``, ``embeddings_hard.umre``,
``run_continual.trec``, ...). Identical config and seed give byte-identical
outputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import metrics as M
from .core import (
    DataError,
    Item,
    Modality,
    Qrels,
    Query,
    TaskSpec,
    UnimrError,
    load_corpus,
    load_qrels,
    load_queries,
    load_tasks,
    read_jsonl,
    save_corpus,
)
from .featurizer import FeaturizerConfig, load_or_featurize
from .fusion import EncodeOptions, FusionParams, encode_corpus, encode_queries, init_params, save_params
from .index import SearchHit, VectorIndex, build, save_store
from .miner import (
    MinedNegatives,
    MinedTriplet,
    MinerConfig,
    MiningQuery,
    mine_all,
    remine_continual,
    sample_negative,
    save_mined,
    save_triplets,
)
from .reranker import CachedScorer, HttpScorer, MockScorer, RerankConfig, rerank
from .trainer import Stage, TrainConfig, TrainExample, TrainResult, train

log = logging.getLogger(__name__)


class ConfigError(UnimrError):
    pass


class StageError(UnimrError):
    def __init__(self, stage: str, artifact: Path | None, cause: Exception):
        super().__init__(f"stage {stage!r} failed ({artifact or 'no artifact'}): {cause}")
        self.stage = stage
        self.artifact = artifact
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration

_TRAIN_DEFAULTS = {
    "rand": TrainConfig(tau=0.05, batch_size=32, lr=1e-3, epochs=2, seed=1),
    "hard": TrainConfig(tau=0.05, batch_size=32, lr=3e-3, epochs=10, seed=2),
    "continual": TrainConfig(tau=0.05, batch_size=32, lr=2e-4, epochs=1, seed=3),
}


@dataclass(frozen=True)
class PipelineConfig:
    corpus: str = "corpus.jsonl"
    queries: str = "queries.jsonl"
    tasks: str = "tasks.jsonl"
    qrels: str = ""  # empty: derive judgments from the queries' pos_ids
    workdir: str = "work"
    featurizer: FeaturizerConfig = FeaturizerConfig(F_t=1024, F_i=256)
    d: int = 64
    init_seed: int = 0
    train_rand: TrainConfig = _TRAIN_DEFAULTS["rand"]
    train_hard: TrainConfig = _TRAIN_DEFAULTS["hard"]
    train_continual: TrainConfig = _TRAIN_DEFAULTS["continual"]
    miner: MinerConfig = MinerConfig()
    rerank: RerankConfig = RerankConfig()
    skip_rerank: bool = False
    pool_mode: str = "global"  # or "per_dataset"
    retrieve_k: int = 50
    negative_seed: int = 7
    run_tag: str = "unimr"

    def __post_init__(self):
        if self.pool_mode not in ("global", "per_dataset"):
            raise ConfigError(f"eval pool mode must be 'global' or 'per_dataset', not {self.pool_mode!r}")
        if self.retrieve_k < max(self.rerank.depth, 1):
            raise ConfigError("retrieve_k must be at least the rerank depth")

    def train_config(self, stage: Stage) -> TrainConfig:
        return {Stage.RAND: self.train_rand, Stage.HARD: self.train_hard, Stage.CONTINUAL: self.train_continual}[stage]

    # flat dotted-key view ---------------------------------------------------

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {
            "paths.corpus": self.corpus,
            "paths.queries": self.queries,
            "paths.tasks": self.tasks,
            "paths.qrels": self.qrels,
            "paths.workdir": self.workdir,
            "featurizer.F_t": self.featurizer.F_t,
            "featurizer.F_i": self.featurizer.F_i,
            "featurizer.seed": self.featurizer.seed,
            "encoder.d": self.d,
            "encoder.seed": self.init_seed,
            "miner.top_n": self.miner.top_n,
            "miner.k_prime": self.miner.k_prime,
            "miner.negative_seed": self.negative_seed,
            "rerank.depth": self.rerank.depth,
            "rerank.scorer": self.rerank.scorer,
            "rerank.max_in_flight": self.rerank.max_in_flight,
            "rerank.skip": self.skip_rerank,
            "eval.pool_mode": self.pool_mode,
            "eval.k": self.retrieve_k,
            "eval.run_tag": self.run_tag,
        }
        for stage in Stage:
            tc = self.train_config(stage)
            for f in fields(TrainConfig):
                flat[f"train.{stage.value}.{f.name}"] = getattr(tc, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> "PipelineConfig":
        base = cls().to_flat()
        unknown = sorted(set(flat) - set(base))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(base)
        for key, value in flat.items():
            merged[key] = _coerce(key, value, base[key])
        try:
            trains = {}
            for stage in Stage:
                kw = {f.name: merged[f"train.{stage.value}.{f.name}"] for f in fields(TrainConfig)}
                trains[stage] = TrainConfig(**kw)
            return cls(
                corpus=merged["paths.corpus"],
                queries=merged["paths.queries"],
                tasks=merged["paths.tasks"],
                qrels=merged["paths.qrels"],
                workdir=merged["paths.workdir"],
                featurizer=FeaturizerConfig(merged["featurizer.F_t"], merged["featurizer.F_i"], merged["featurizer.seed"]),
                d=merged["encoder.d"],
                init_seed=merged["encoder.seed"],
                train_rand=trains[Stage.RAND],
                train_hard=trains[Stage.HARD],
                train_continual=trains[Stage.CONTINUAL],
                miner=MinerConfig(merged["miner.top_n"], merged["miner.k_prime"]),
                negative_seed=merged["miner.negative_seed"],
                rerank=RerankConfig(merged["rerank.depth"], merged["rerank.scorer"], merged["rerank.max_in_flight"]),
                skip_rerank=merged["rerank.skip"],
                pool_mode=merged["eval.pool_mode"],
                retrieve_k=merged["eval.k"],
                run_tag=merged["eval.run_tag"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def resolve(self, base_dir: str | Path) -> "PipelineConfig":
        """Make relative paths absolute against ``base_dir`` (the config file's folder)."""
        base = Path(base_dir)

        def fix(p: str) -> str:
            return p if not p or Path(p).is_absolute() else str(base / p)

        return replace(self, corpus=fix(self.corpus), queries=fix(self.queries), tasks=fix(self.tasks),
                       qrels=fix(self.qrels), workdir=fix(self.workdir))


def _format(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    return str(v)


def _coerce(key: str, value: object, default: object) -> object:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key.endswith(".steps"):
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        flat[key] = value
    return flat


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> PipelineConfig:
    flat = parse_config_text(Path(path).read_text(encoding="utf-8"))
    flat.update(overrides or {})
    return PipelineConfig.from_flat(flat).resolve(Path(path).parent)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    corpus: dict[str, Item]
    queries: list[Query]
    tasks: dict[str, TaskSpec]
    qrels: Qrels
    doc_dataset: dict[str, str] = field(default_factory=dict)

    @property
    def train_queries(self) -> list[Query]:
        return [q for q in self.queries if q.split == "train"]

    @property
    def test_queries(self) -> list[Query]:
        return [q for q in self.queries if q.split != "train"]

    def task(self, q: Query) -> TaskSpec:
        return self.tasks[q.task_id]


def load_dataset(cfg: PipelineConfig) -> Dataset:
    corpus_items = load_corpus(cfg.corpus)
    doc_dataset = {str(r["id"]): str(r["dataset_id"]) for r in read_jsonl(cfg.corpus) if "dataset_id" in r}
    queries = load_queries(cfg.queries)
    tasks = load_tasks(cfg.tasks)
    for q in queries:
        if q.task_id not in tasks:
            raise DataError(f"query {q.qid}: unknown task {q.task_id!r}")
    qrels = load_qrels(cfg.qrels) if cfg.qrels else Qrels.from_queries(queries)
    qrels.check_pool(it.id for it in corpus_items)
    corpus_dir = Path(cfg.corpus).parent
    query_dir = Path(cfg.queries).parent
    corpus = {it.id: load_or_featurize(it, cfg.featurizer, corpus_dir) for it in corpus_items}
    queries = [replace(q, item=load_or_featurize(q.item, cfg.featurizer, query_dir)) for q in queries]
    return Dataset(corpus, queries, tasks, qrels, doc_dataset)


# ---------------------------------------------------------------------------
# run files (TREC: qid Q0 doc_id rank score tag)


def write_run(path: str | Path, runs: Mapping[str, Sequence[SearchHit]], tag: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(runs):
            for h in runs[qid]:
                fh.write(f"{qid} Q0 {h.doc_id} {h.rank} {h.score!r} {tag}\n")


def read_run(path: str | Path) -> dict[str, list[tuple[str, int, float]]]:
    out: dict[str, list[tuple[str, int, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 'qid Q0 doc_id rank score tag'")
            qid, _, doc_id, rank, score, _ = parts
            out.setdefault(qid, []).append((doc_id, int(rank), float(score)))
    for hits in out.values():
        hits.sort(key=lambda h: h[1])
    return out


# ---------------------------------------------------------------------------
# stage helpers


def training_examples(ds: Dataset, queries: Iterable[Query]) -> list[TrainExample]:
    out = []
    for q in queries:
        if not q.pos_ids:
            continue
        task = ds.task(q)
        # the first labeled positive is the training target; the rest are kept out of the negatives
        out.append(TrainExample(q.task_id, task.instruction, q.item, ds.corpus[q.pos_ids[0]]))
    return out


def is_text_to_text(ds: Dataset, q: Query) -> bool:
    return q.item.modality is Modality.TEXT and ds.task(q).desired_modality is Modality.TEXT


def embed_corpus(ds: Dataset, params: FusionParams, fcfg: FeaturizerConfig):
    items = [ds.corpus[k] for k in sorted(ds.corpus)]
    return encode_corpus(items, params, fcfg)


def encode_query_matrix(ds: Dataset, queries: Sequence[Query], params: FusionParams, fcfg: FeaturizerConfig,
                        include_instruction: bool = True) -> np.ndarray:
    pairs = [(ds.task(q).instruction, q.item) for q in queries]
    return encode_queries(pairs, params, EncodeOptions(include_instruction), fcfg)


def mining_queries(ds: Dataset, queries: Sequence[Query], vecs: np.ndarray) -> list[MiningQuery]:
    return [
        MiningQuery(q.qid, v, ds.task(q).desired_modality, q.pos_ids[0], tuple(q.pos_ids[1:]))
        for q, v in zip(queries, vecs)
    ]


class TripletSampler:
    """Draws one negative per query for each epoch (C1 or C2 with equal probability)."""

    def __init__(self, ds: Dataset, queries: Sequence[Query], mined: Mapping[str, MinedNegatives]):
        self.ds = ds
        self.queries = [q for q in queries if q.pos_ids]
        self.mined = mined

    def triplets(self, rng: np.random.Generator) -> list[tuple[TrainExample, MinedTriplet | None]]:
        out = []
        for q in self.queries:
            task = self.ds.task(q)
            pos = self.ds.corpus[q.pos_ids[0]]
            m = self.mined.get(q.qid)
            draw = sample_negative(m, rng) if m is not None else None
            if draw is None:
                out.append((TrainExample(q.task_id, task.instruction, q.item, pos), None))
                continue
            neg_id, cls = draw
            out.append((
                TrainExample(q.task_id, task.instruction, q.item, pos, self.ds.corpus[neg_id], cls),
                MinedTriplet(q.qid, pos.id, neg_id, cls, m.ranks.get(neg_id)),
            ))
        return out

    def __call__(self, epoch: int, rng: np.random.Generator) -> list[TrainExample]:
        return [ex for ex, _ in self.triplets(rng)]


def build_index(ds: Dataset, records, pool_tag: str = "global") -> VectorIndex:
    return build(records, pool_tag)


def retrieve(ds: Dataset, queries: Sequence[Query], params: FusionParams, fcfg: FeaturizerConfig, records,
             k: int, pool_mode: str = "global", include_instruction: bool = True) -> dict[str, list[SearchHit]]:
    if not queries:
        return {}
    vecs = encode_query_matrix(ds, queries, params, fcfg, include_instruction)
    if pool_mode == "global":
        index = build(records, "global")
        return {q.qid: hits for q, hits in zip(queries, index.search_batch(vecs, k))}
    out = {}
    by_ds: dict[str, list[int]] = {}
    for n, q in enumerate(queries):
        by_ds.setdefault(ds.task(q).dataset_id, []).append(n)
    for dataset_id in sorted(by_ds):
        pool = [r for r in records if ds.doc_dataset.get(r.id, dataset_id) == dataset_id]
        index = build(pool, dataset_id)
        rows = by_ds[dataset_id]
        for n, hits in zip(rows, index.search_batch(vecs[rows], k)):
            out[queries[n].qid] = hits
    return out


METRIC_NAMES = ("score", "R@1", "R@5", "R@10", "M.A.@1")


def evaluate(ds: Dataset, runs: Mapping[str, Sequence[tuple[str, int, float]] | Sequence[SearchHit]],
             queries: Sequence[Query] | None = None, pool_tag: str = "global") -> M.RunReport:
    """Per-(dataset, task) primary metric, R@1/5/10 and top-1 modality accuracy, macro-averaged."""
    queries = ds.test_queries if queries is None else queries
    per_query: dict[tuple[str, str], dict[str, list[float]]] = {}
    groups: dict[tuple[str, str], str] = {}
    for q in queries:
        grades = ds.qrels.grades(q.qid)
        if not any(g > 0 for g in grades.values()):
            continue
        task = ds.task(q)
        hits = runs.get(q.qid, [])
        ranked = [h.doc_id if isinstance(h, SearchHit) else h[0] for h in hits]
        relevant = {d for d, g in grades.items() if g > 0}
        key = (task.dataset_id, task.task_id)
        groups[key] = M.query_group(q.item.modality)
        top_mod = ds.corpus[ranked[0]].modality if ranked else None
        vals = per_query.setdefault(key, {n: [] for n in METRIC_NAMES})
        vals["score"].append(M.primary_metric_value(task.metric.value, ranked, grades))
        vals["R@1"].append(M.recall_at_k(ranked, relevant, 1))
        vals["R@5"].append(M.recall_at_k(ranked, relevant, 5))
        vals["R@10"].append(M.recall_at_k(ranked, relevant, 10))
        vals["M.A.@1"].append(M.modality_accuracy_at_1(top_mod, task.desired_modality))
    return M.macro_average(per_query, groups, pool_tag=pool_tag)


def make_scorer(cfg: PipelineConfig, ds: Dataset, cache_path: Path | None):
    if cfg.rerank.scorer == "mock":
        inner = MockScorer(ds.qrels)
    elif cfg.rerank.scorer.startswith(("http://", "https://")):
        inner = HttpScorer(cfg.rerank.scorer)
    else:
        raise ConfigError(f"rerank.scorer must be 'mock' or an http(s) URL, not {cfg.rerank.scorer!r}")
    return CachedScorer(inner, cache_path)


def rerank_runs(ds: Dataset, runs: Mapping[str, Sequence[SearchHit]], queries: Sequence[Query], scorer,
                rcfg: RerankConfig) -> dict[str, list[SearchHit]]:
    out = {}
    by_qid = {q.qid: q for q in queries}
    for qid in sorted(runs):
        q = by_qid[qid]
        out[qid] = rerank(q.item, runs[qid], ds.corpus, scorer, rcfg, dataset_id=ds.task(q).dataset_id)
    return out


# ---------------------------------------------------------------------------
# the full pipeline


@dataclass
class PipelineResult:
    reports: dict[str, M.RunReport]
    params: dict[str, FusionParams]
    traces: dict[str, TrainResult]
    mining_stats: dict[str, object]
    workdir: Path


class _Stage:
    def __init__(self, name: str, artifact: Path | None = None):
        self.name = name
        self.artifact = artifact

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, self.artifact, exc) from exc
        return False


def cmd_pipeline(cfg: PipelineConfig) -> PipelineResult:
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    fcfg = cfg.featurizer

    with _Stage("featurize", work / "corpus_featurized.jsonl") as st:
        ds = load_dataset(cfg)
        save_corpus(st.artifact, (ds.corpus[k] for k in sorted(ds.corpus)))

    train_q = ds.train_queries
    text_q = [q for q in train_q if is_text_to_text(ds, q)]
    init = init_params(cfg.d, fcfg, cfg.init_seed)
    save_params(work / "params_init.umrp", init)
    params: dict[str, FusionParams] = {}
    traces: dict[str, TrainResult] = {}

    def fit(stage: Stage, examples, start: FusionParams, text_examples=None) -> FusionParams:
        with _Stage(f"train_{stage.value}", work / f"params_{stage.value}.umrp") as st:
            res = train(examples, start, cfg.train_config(stage), stage, fcfg, text_examples)
            save_params(st.artifact, res.params)
            (work / f"trace_{stage.value}.csv").write_text(res.trace_csv(), encoding="utf-8")
        params[stage.value] = res.params
        traces[stage.value] = res
        return res.params

    def embed(tag: str, p: FusionParams):
        with _Stage(f"embed_{tag}", work / f"embeddings_{tag}.umre") as st:
            records = embed_corpus(ds, p, fcfg)
            save_store(st.artifact, records, cfg.d)
        return records

    # stage 1: in-batch (random) negatives from the initial encoder
    p_rand = fit(Stage.RAND, training_examples(ds, train_q), init)
    rec_rand = embed("rand", p_rand)

    # stage 2: mine C1/C2 with the random-negative model, retrain from the initial encoder
    with _Stage("mine_rand", work / "mined_rand.jsonl") as st:
        vecs = encode_query_matrix(ds, train_q, p_rand, fcfg, cfg.train_rand.include_instruction)
        mined_rand, stats_rand = mine_all(mining_queries(ds, train_q, vecs), build(rec_rand), cfg.miner)
        save_mined(st.artifact, mined_rand)
        sampler = TripletSampler(ds, train_q, mined_rand)
        save_triplets(work / "triplets_hard.jsonl",
                      [t for _, t in sampler.triplets(np.random.default_rng(cfg.negative_seed)) if t is not None])
    p_hard = fit(Stage.HARD, sampler, init)
    rec_hard = embed("hard", p_hard)

    # stage 3: continual mixing of all triplets with text-to-text triplets, from the hard model;
    # C2 re-mined with the hard model, C1 kept from the random-negative model
    with _Stage("mine_continual", work / "mined_continual.jsonl") as st:
        vecs = encode_query_matrix(ds, train_q, p_hard, fcfg, cfg.train_hard.include_instruction)
        mqs = mining_queries(ds, train_q, vecs)
        hard_index = build(rec_hard)
        mined_cont = {
            mq.qid: remine_continual(mined_rand[mq.qid], mq.vector, mq.desired_modality, mq.positive_id, hard_index,
                                     cfg.miner, exclude=mq.exclude)
            for mq in sorted(mqs, key=lambda m: m.qid)
        }
        save_mined(st.artifact, mined_cont)
    stats_cont = type(stats_rand).of(mined_cont)
    source_a = TripletSampler(ds, train_q, mined_cont)
    source_b = TripletSampler(ds, text_q, mined_cont)
    if text_q:
        p_cont = fit(Stage.CONTINUAL, source_a, p_hard, source_b)
    else:
        log.warning("no text-to-text training queries; continual stage skipped")
        p_cont = p_hard
        params["continual"] = p_hard
    rec_cont = embed("continual", p_cont)

    # retrieval and evaluation of every stage on held-out queries
    test_q = ds.test_queries
    reports: dict[str, M.RunReport] = {}
    records = {"rand": rec_rand, "hard": rec_hard, "continual": rec_cont}
    final_runs = None
    for tag, p in (("rand", p_rand), ("hard", p_hard), ("continual", p_cont)):
        with _Stage(f"retrieve_{tag}", work / f"run_{tag}.trec") as st:
            runs = retrieve(ds, test_q, p, fcfg, records[tag], cfg.retrieve_k, cfg.pool_mode,
                            cfg.train_config(Stage(tag)).include_instruction)
            write_run(st.artifact, runs, f"{cfg.run_tag}-{tag}")
        with _Stage(f"eval_{tag}", work / f"report_{tag}.csv") as st:
            rep = evaluate(ds, runs, test_q, cfg.pool_mode)
            st.artifact.write_text(rep.to_csv(), encoding="utf-8")
            (work / f"report_{tag}.txt").write_text(rep.table(METRIC_NAMES), encoding="utf-8")
        reports[tag] = rep
        final_runs = runs

    if not cfg.skip_rerank:
        with _Stage("rerank", work / "run_continual_rerank.trec") as st:
            scorer = make_scorer(cfg, ds, work / "scorer_cache.jsonl")
            rr = rerank_runs(ds, final_runs, test_q, scorer, cfg.rerank)
            write_run(st.artifact, rr, f"{cfg.run_tag}-rerank")
        with _Stage("eval_rerank", work / "report_rerank.csv") as st:
            rep = evaluate(ds, rr, test_q, cfg.pool_mode)
            st.artifact.write_text(rep.to_csv(), encoding="utf-8")
            (work / "report_rerank.txt").write_text(rep.table(METRIC_NAMES), encoding="utf-8")
        reports["rerank"] = rep

    stats = {"rand": stats_rand, "continual": stats_cont}
    return PipelineResult(reports, params, traces, stats, work)


def cmd_eval(ds: Dataset, run_path: str | Path, queries: Sequence[Query] | None = None,
             pool_tag: str = "global") -> M.RunReport:
    """Re-evaluate a persisted TREC run against the dataset's judgments."""
    runs = read_run(run_path)
    queries = ds.test_queries if queries is None else queries
    return evaluate(ds, runs, queries, pool_tag)
