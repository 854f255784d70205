"""Command-line entry point: ``unimr <subcommand> [--config FILE] [--dotted.key VALUE ...]``.

Every config key (see ``unimr pipeline --help``) can be set in the config file
or overridden by a flag of the same name. Exit codes: 0 ok, 1 check failed,
2 config error, 3 data error, 4 scorer unavailable.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import DataError, Modality, UnimrError, save_corpus
from .fusion import init_params, load_params, save_params
from .index import SearchHit, build, load_index, load_store, merge, save_store
from .miner import load_mined, mine_all, remine_continual, save_mined
from .pipeline import (
    METRIC_NAMES,
    ConfigError,
    PipelineConfig,
    StageError,
    TripletSampler,
    cmd_eval,
    cmd_pipeline,
    embed_corpus,
    encode_query_matrix,
    is_text_to_text,
    load_config,
    load_dataset,
    make_scorer,
    mining_queries,
    read_run,
    rerank_runs,
    retrieve,
    training_examples,
    write_run,
)
from .reranker import ScorerUnavailable
from .synth import SynthSpec, cmd_synth
from .trainer import Stage, grad_check, random_gradcheck_case, train

log = logging.getLogger("unimr")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_SCORER = 0, 1, 2, 3, 4


def _config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat 'key = value' config file")
    grp = parser.add_argument_group("config overrides")
    for key, default in PipelineConfig().to_flat().items():
        grp.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", help=f"(default {default})")


def _config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        return load_config(args.config, overrides)
    return PipelineConfig.from_flat(overrides)


def _split(ds, name: str):
    return {"test": ds.test_queries, "train": ds.train_queries}.get(name, ds.queries)


def _work(cfg: PipelineConfig) -> Path:
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    return work


# ---------------------------------------------------------------------------
# subcommands


def run_synth(args) -> int:
    counts = {"text": args.docs_per_cluster, "image": args.docs_per_cluster, "image,text": args.docs_per_cluster}
    try:
        spec = SynthSpec(n_clusters=args.n_clusters, docs_per_cluster=counts, n_queries=args.n_queries,
                         modality_confound_strength=args.confound, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    paths = cmd_synth(spec, args.out)
    # a ready-to-run config next to the data
    cfg = PipelineConfig(corpus="corpus.jsonl", queries="queries.jsonl", tasks="tasks.jsonl", workdir="work")
    (Path(args.out) / "pipeline.cfg").write_text(cfg.to_text(), encoding="utf-8")
    for name, p in paths.items():
        print(f"{name}\t{p}")
    print(f"config\t{Path(args.out) / 'pipeline.cfg'}")
    return EXIT_OK


def run_featurize(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    out = Path(args.out) if args.out else _work(cfg) / "corpus_featurized.jsonl"
    save_corpus(out, (ds.corpus[k] for k in sorted(ds.corpus)))
    print(out)
    return EXIT_OK


def run_train(args) -> int:
    cfg = _config(args)
    work = _work(cfg)
    stage = Stage(args.stage)
    ds = load_dataset(cfg)
    fcfg = cfg.featurizer
    if args.init:
        start = load_params(args.init)
    elif stage is Stage.CONTINUAL:
        start = load_params(work / "params_hard.umrp")
    else:
        start = init_params(cfg.d, fcfg, cfg.init_seed)
    train_q = ds.train_queries
    if stage is Stage.RAND:
        examples, text_examples = training_examples(ds, train_q), None
    else:
        mined_path = args.mined or work / ("mined_rand.jsonl" if stage is Stage.HARD else "mined_continual.jsonl")
        mined = load_mined(mined_path)
        examples = TripletSampler(ds, train_q, mined)
        text_examples = None
        if stage is Stage.CONTINUAL:
            text_examples = TripletSampler(ds, [q for q in train_q if is_text_to_text(ds, q)], mined)
    res = train(examples, start, cfg.train_config(stage), stage, fcfg, text_examples)
    out = Path(args.out) if args.out else work / f"params_{stage.value}.umrp"
    save_params(out, res.params)
    out.with_name(f"trace_{stage.value}.csv").write_text(res.trace_csv(), encoding="utf-8")
    print(f"{out}\tsteps={len(res.trace)}\tfinal_loss={res.trace[-1].loss if res.trace else float('nan'):.6f}")
    return EXIT_OK


def run_embed(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    params = load_params(args.params)
    records = embed_corpus(ds, params, cfg.featurizer)
    save_store(args.out, records, params.d)
    print(f"{args.out}\t{len(records)} vectors, dim {params.d}")
    return EXIT_OK


def run_index(args) -> int:
    indexes = [load_index(p, pool_tag=Path(p).stem) for p in args.stores]
    idx = merge(indexes, args.pool_tag) if len(indexes) > 1 else indexes[0]
    if args.out:
        save_store(args.out, idx.records(), idx.dim)
    counts: dict[str, int] = {}
    for m in idx.modalities:
        tag = Modality(int(m)).tag
        counts[tag] = counts.get(tag, 0) + 1
    print(f"{len(idx)} vectors, dim {idx.dim}, " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def run_mine(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    params = load_params(args.params)
    index = build(load_store(args.store))
    train_q = ds.train_queries
    vecs = encode_query_matrix(ds, train_q, params, cfg.featurizer)
    mqs = mining_queries(ds, train_q, vecs)
    if args.remine_from:
        prior = load_mined(args.remine_from)
        mined = {mq.qid: remine_continual(prior[mq.qid], mq.vector, mq.desired_modality, mq.positive_id, index,
                                          cfg.miner, exclude=mq.exclude)
                 for mq in sorted(mqs, key=lambda m: m.qid) if mq.qid in prior}
    else:
        mined, _ = mine_all(mqs, index, cfg.miner)
    save_mined(args.out, mined)
    n = max(len(mined), 1)
    print(f"{args.out}\t{len(mined)} queries, mean |C1| {sum(len(m.C1) for m in mined.values()) / n:.2f},"
          f" mean |C2| {sum(len(m.C2) for m in mined.values()) / n:.2f}")
    return EXIT_OK


def run_retrieve(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    params = load_params(args.params)
    records = load_store(args.store)
    runs = retrieve(ds, _split(ds, args.split), params, cfg.featurizer, records, cfg.retrieve_k, cfg.pool_mode)
    write_run(args.out, runs, args.tag or cfg.run_tag)
    print(f"{args.out}\t{len(runs)} queries")
    return EXIT_OK


def _hits_from_run(ds, run) -> dict[str, list[SearchHit]]:
    out = {}
    for qid, rows in run.items():
        out[qid] = []
        for doc_id, rank, score in rows:
            if doc_id not in ds.corpus:
                raise DataError(f"run references unknown doc {doc_id!r}")
            out[qid].append(SearchHit(doc_id, score, rank, ds.corpus[doc_id].modality))
    return out


def run_rerank(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    runs = _hits_from_run(ds, read_run(args.run))
    by_qid = {q.qid: q for q in ds.queries}
    missing = sorted(set(runs) - set(by_qid))
    if missing:
        raise DataError(f"run has unknown queries, e.g. {missing[0]!r}")
    scorer = make_scorer(cfg, ds, Path(args.cache) if args.cache else _work(cfg) / "scorer_cache.jsonl")
    rr = rerank_runs(ds, runs, [by_qid[q] for q in sorted(runs)], scorer, cfg.rerank)
    write_run(args.out, rr, args.tag or f"{cfg.run_tag}-rerank")
    print(f"{args.out}\t{len(rr)} queries reranked to depth {cfg.rerank.depth}")
    return EXIT_OK


def run_eval(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    rep = cmd_eval(ds, args.run, _split(ds, args.split), cfg.pool_mode)
    if args.out:
        Path(args.out).write_text(rep.to_csv(), encoding="utf-8")
    print(rep.table(METRIC_NAMES), end="")
    return EXIT_OK


def run_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.instances):
        params, qf, pf, pos = random_gradcheck_case(rng, args.d, args.F, args.batch)
        worst = max(worst, grad_check(params, qf, pf, pos, args.tau, rng=rng).max_rel_error)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} gradcheck: {args.instances} instances, max relative error {worst:.3e}"
          f" (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


def run_pipeline(args) -> int:
    cfg = _config(args)
    res = cmd_pipeline(cfg)
    for tag, rep in res.reports.items():
        print(f"== {tag}")
        print(rep.table(METRIC_NAMES), end="")
    print(f"artifacts in {res.workdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unimr", description="Universal multimodal retrieval: train, mine, retrieve, rerank.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic benchmark with wrong-modality look-alikes")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clusters", type=int, default=SynthSpec.n_clusters)
    s.add_argument("--docs-per-cluster", type=int, default=1)
    s.add_argument("--n-queries", type=int, default=SynthSpec.n_queries)
    s.add_argument("--confound", type=float, default=SynthSpec.modality_confound_strength)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=run_synth)

    s = sub.add_parser("featurize", help="featurize the corpus and write it with inline image features")
    s.add_argument("--out")
    _config_flags(s)
    s.set_defaults(fn=run_featurize)

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--stage", choices=[st.value for st in Stage], required=True)
    s.add_argument("--init", help="starting checkpoint (default: fresh init; params_hard for continual)")
    s.add_argument("--mined", help="mined negatives for hard/continual stages")
    s.add_argument("--out")
    _config_flags(s)
    s.set_defaults(fn=run_train)

    s = sub.add_parser("embed", help="embed the corpus with a checkpoint")
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    _config_flags(s)
    s.set_defaults(fn=run_embed)

    s = sub.add_parser("index", help="load, check and optionally merge embedding stores")
    s.add_argument("stores", nargs="+")
    s.add_argument("--out")
    s.add_argument("--pool-tag", default="global")
    s.set_defaults(fn=run_index)

    s = sub.add_parser("mine", help="mine C1/C2 negatives for the training queries")
    s.add_argument("--params", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--remine-from", help="keep C1 from this file and re-mine only C2")
    s.add_argument("--out", required=True)
    _config_flags(s)
    s.set_defaults(fn=run_mine)

    s = sub.add_parser("retrieve", help="write a TREC run for a query split")
    s.add_argument("--params", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--tag")
    s.add_argument("--out", required=True)
    _config_flags(s)
    s.set_defaults(fn=run_retrieve)

    s = sub.add_parser("rerank", help="rerank the head of a TREC run with True/False scoring")
    s.add_argument("--run", required=True)
    s.add_argument("--cache")
    s.add_argument("--tag")
    s.add_argument("--out", required=True)
    _config_flags(s)
    s.set_defaults(fn=run_rerank)

    s = sub.add_parser("eval", help="evaluate a TREC run")
    s.add_argument("--run", required=True)
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--out", help="also write the report as CSV")
    _config_flags(s)
    s.set_defaults(fn=run_eval)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradient on random instances")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--d", type=int, default=8)
    s.add_argument("--F", type=int, default=16)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=run_gradcheck)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    _config_flags(s)
    s.set_defaults(fn=run_pipeline)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ScorerUnavailable):
        return EXIT_SCORER
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UnimrError, OSError, ValueError, KeyError) as exc:
        print(f"unimr {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
