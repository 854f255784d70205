"""InfoNCE training of the fusion encoder with in-batch, mined-hard, and mixed-task batches."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Item, Modality, NonFinite, UnimrError
from .featurizer import FeaturizerConfig
from .fusion import EncodeOptions, Features, FusionParams, candidate_features, encode_features, query_features
from .miner import NegativeClass


class BatchInfeasible(UnimrError):
    pass


class EmptySource(UnimrError):
    pass


class Stage(str, enum.Enum):
    RAND = "rand"
    HARD = "hard"
    CONTINUAL = "continual"


MAX_RESAMPLE = 100


@dataclass(frozen=True)
class TrainExample:
    task_id: str
    instruction: str
    query: Item
    positive: Item
    negative: Item | None = None
    negative_class: NegativeClass | None = None

    def __post_init__(self):
        if (self.negative is None) != (self.negative_class is None):
            raise ValueError(f"{self.query.id}: negative and negative_class must be set together")
        if self.negative is not None and self.negative.id == self.positive.id:
            raise ValueError(f"{self.query.id}: negative equals the positive {self.positive.id!r}")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 1
    seed: int = 0
    include_instruction: bool = True
    steps: int | None = None  # continual stage only; defaults to one pass over both sources per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# Reference values reported for the full-scale runs (8 GPUs); not used as defaults.
PAPER_SCALE = {
    "batch_size_rand": 128 * 8,
    "batch_size_hard": 64 * 8,
    "lr_mllm": 1e-4,
    "lr_clip": 1e-5,
    "lr_continual": 2e-5,
    "epochs_mllm": 2,
    "epochs_clip": 20,
    "continual_steps": 4500,
}


@dataclass(frozen=True, eq=False)
class BatchPool:
    """Per-batch candidate set: ordered, deduplicated by id."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    modalities: tuple[Modality, ...]


@dataclass(frozen=True)
class Batch:
    examples: tuple[TrainExample, ...]
    pool: tuple[Item, ...]
    pos_index: tuple[int, ...]


# ---------------------------------------------------------------------------
# loss and gradient


def _log_softmax_rows(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1, keepdims=True)
    Z = S - m
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def infonce_loss(query_vecs: np.ndarray, pool: BatchPool | np.ndarray, pos_index: Sequence[int], tau: float) -> float:
    """Mean negative log-softmax of each query's positive over the shared pool."""
    Q = np.atleast_2d(np.asarray(query_vecs, dtype=np.float64))
    C = np.atleast_2d(np.asarray(pool.vectors if isinstance(pool, BatchPool) else pool, dtype=np.float64))
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(C))) or not math.isfinite(tau):
        raise NonFinite("NaN/Inf in InfoNCE inputs")
    pos = np.asarray(pos_index, dtype=np.int64)
    if pos.shape != (Q.shape[0],) or np.any(pos < 0) or np.any(pos >= C.shape[0]):
        raise IndexError("pos_index must hold one valid pool index per query")
    logp = _log_softmax_rows(Q @ C.T / tau)
    return float(-logp[np.arange(Q.shape[0]), pos].mean()) + 0.0  # no -0.0


@dataclass(frozen=True, eq=False)
class Gradient:
    loss: float
    W_t: np.ndarray
    W_i: np.ndarray


def _backprop_rows(dU: np.ndarray, raw: np.ndarray, unit: np.ndarray) -> np.ndarray:
    # d(r/|r|) = (I - v v^T) / |r|
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return (dU - unit * np.sum(dU * unit, axis=1, keepdims=True)) / norms


def _accumulate_weight_grads(dR: np.ndarray, feats: Sequence[Features], gW_t: np.ndarray, gW_i: np.ndarray) -> None:
    rows_t = [k for k, f in enumerate(feats) if f.text is not None]
    rows_i = [k for k, f in enumerate(feats) if f.image is not None]
    if rows_t:
        gW_t += dR[rows_t].T @ np.stack([feats[k].text for k in rows_t])
    if rows_i:
        gW_i += dR[rows_i].T @ np.stack([feats[k].image for k in rows_i])


def infonce_grad(query_feats: Sequence[Features], pool_feats: Sequence[Features], pos_index: Sequence[int],
                 params: FusionParams, tau: float) -> Gradient:
    """Loss and exact gradient w.r.t. both projections of the composed map.

    Chain: project -> L2-normalize -> scaled inner products -> log-softmax. Query
    and candidate towers share parameters, so both contribute to each matrix.
    """
    rq, Q = encode_features(params, query_feats)
    rc, C = encode_features(params, pool_feats)
    pos = np.asarray(pos_index, dtype=np.int64)
    B = Q.shape[0]
    logp = _log_softmax_rows(Q @ C.T / tau)
    loss = float(-logp[np.arange(B), pos].mean()) + 0.0
    if not math.isfinite(loss):
        raise NonFinite("non-finite InfoNCE loss")
    G = np.exp(logp)
    G[np.arange(B), pos] -= 1.0
    G /= B
    dQ = G @ C / tau
    dC = G.T @ Q / tau
    gW_t = np.zeros_like(params.W_t)
    gW_i = np.zeros_like(params.W_i)
    _accumulate_weight_grads(_backprop_rows(dQ, rq, Q), query_feats, gW_t, gW_i)
    _accumulate_weight_grads(_backprop_rows(dC, rc, C), pool_feats, gW_t, gW_i)
    if not (np.all(np.isfinite(gW_t)) and np.all(np.isfinite(gW_i))):
        raise NonFinite("non-finite gradient")
    return Gradient(loss, gW_t, gW_i)


def features_loss(query_feats, pool_feats, pos_index, params: FusionParams, tau: float) -> float:
    _, Q = encode_features(params, query_feats)
    _, C = encode_features(params, pool_feats)
    return infonce_loss(Q, C, pos_index, tau)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int, int]  # (matrix, row, col)


def grad_check(params: FusionParams, query_feats: Sequence[Features], pool_feats: Sequence[Features],
               pos_index: Sequence[int], tau: float, n_coords: int = 200, h: float = 1e-5,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the analytic gradient with central differences on a random coordinate subset."""
    rng = rng if rng is not None else np.random.default_rng(0)
    grad = infonce_grad(query_feats, pool_feats, pos_index, params, tau)
    n_t, n_i = params.W_t.size, params.W_i.size
    total = n_t + n_i
    coords = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, size=n_coords, replace=False))
    W_t = params.W_t.copy()
    W_i = params.W_i.copy()
    worst_err, worst = 0.0, ("W_t", 0, 0)
    for c in coords:
        name, mat, flat, g_a = (
            ("W_t", W_t, int(c), grad.W_t.flat[int(c)]) if c < n_t else ("W_i", W_i, int(c - n_t), grad.W_i.flat[int(c - n_t)])
        )
        orig = mat.flat[flat]
        mat.flat[flat] = orig + h
        up = features_loss(query_feats, pool_feats, pos_index, FusionParams(W_t, W_i), tau)
        mat.flat[flat] = orig - h
        down = features_loss(query_feats, pool_feats, pos_index, FusionParams(W_t, W_i), tau)
        mat.flat[flat] = orig
        g_n = (up - down) / (2 * h)
        err = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
        if err > worst_err:
            worst_err = err
            worst = (name, *np.unravel_index(flat, mat.shape))
    return GradCheckReport(float(worst_err), len(coords), (worst[0], int(worst[1]), int(worst[2])))


def _random_features(rng: np.random.Generator, F: int) -> Features:
    def unit():
        v = rng.standard_normal(F)
        return v / np.linalg.norm(v)

    modality = Modality(int(rng.integers(3)))
    return Features(unit() if modality.has_text else None, unit() if modality.has_image else None)


def random_gradcheck_case(rng: np.random.Generator, d: int = 8, F: int = 16, batch: int = 4):
    """A random instance with one hard negative per query: (params, query_feats, pool_feats, pos_index)."""
    params = FusionParams(rng.standard_normal((d, F)), rng.standard_normal((d, F)))
    qf = [_random_features(rng, F) for _ in range(batch)]
    pf = [_random_features(rng, F) for _ in range(2 * batch)]
    pos = list(range(0, 2 * batch, 2))  # positive, then its negative
    return params, qf, pf, pos


# ---------------------------------------------------------------------------
# batching


def _fill_batches(examples: Sequence[TrainExample], batch_size: int, rng: np.random.Generator) -> list[list[TrainExample]]:
    """Shuffle, then fill fixed-size batches whose positives are pairwise distinct.

    A colliding example is swapped for a random remaining one, up to
    ``MAX_RESAMPLE`` draws. When a batch cannot be completed the epoch ends there
    and the leftovers are dropped like a partial batch; if not even the first
    batch can be filled the data is infeasible for this batch size.
    """
    remaining = [examples[k] for k in rng.permutation(len(examples))]
    batches = []
    while len(remaining) >= batch_size:
        batch, used = [], set()
        for _ in range(batch_size):
            for attempt in range(MAX_RESAMPLE):
                j = 0 if attempt == 0 else int(rng.integers(len(remaining)))
                if remaining[j].positive.id not in used:
                    break
            else:
                if not batches:
                    raise BatchInfeasible(
                        f"no example with an unused positive after {MAX_RESAMPLE} draws (batch size {batch_size})"
                    )
                return batches
            ex = remaining.pop(j)
            used.add(ex.positive.id)
            batch.append(ex)
        batches.append(batch)
    return batches


def _pool_of(batch: Sequence[TrainExample], with_negatives: bool) -> Batch:
    pool: list[Item] = []
    where: dict[str, int] = {}

    def add(item: Item) -> int:
        if item.id not in where:
            where[item.id] = len(pool)
            pool.append(item)
        return where[item.id]

    pos_index = []
    for ex in batch:
        pos_index.append(add(ex.positive))
        if with_negatives and ex.negative is not None:
            add(ex.negative)
    return Batch(tuple(batch), tuple(pool), tuple(pos_index))


def make_batches_rand(examples: Sequence[TrainExample], cfg: TrainConfig, rng: np.random.Generator) -> list[Batch]:
    return [_pool_of(b, False) for b in _fill_batches(examples, cfg.batch_size, rng)]


def make_batches_hard(examples: Sequence[TrainExample], cfg: TrainConfig, rng: np.random.Generator) -> list[Batch]:
    """Pools hold every positive followed by its negative, deduplicated by id (first kept)."""
    return [_pool_of(b, True) for b in _fill_batches(examples, cfg.batch_size, rng)]


def sample_mixed(source_a: Sequence[TrainExample], source_b: Sequence[TrainExample],
                 rng: np.random.Generator) -> TrainExample:
    """Pick a source with probability 1/2, then an example uniformly within it."""
    if not source_a or not source_b:
        raise EmptySource("mixed sampling needs two non-empty sources")
    src = source_a if rng.random() < 0.5 else source_b
    return src[int(rng.integers(len(src)))]


def make_batch_mixed(source_a, source_b, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    batch, used = [], set()
    for _ in range(cfg.batch_size):
        for _ in range(MAX_RESAMPLE):
            ex = sample_mixed(source_a, source_b, rng)
            if ex.positive.id not in used:
                break
        else:
            raise BatchInfeasible(f"mixed sampling kept colliding on positives (batch size {cfg.batch_size})")
        used.add(ex.positive.id)
        batch.append(ex)
    return _pool_of(batch, True)


# ---------------------------------------------------------------------------
# training loop


class FeatureCache:
    """Memoizes featurized queries (keyed with their instruction) and candidates."""

    def __init__(self, fcfg: FeaturizerConfig, opts: EncodeOptions = EncodeOptions()):
        self.fcfg = fcfg
        self.opts = opts
        self._q: dict[tuple[str, str], Features] = {}
        self._c: dict[str, Features] = {}

    def query(self, inst: str, q: Item) -> Features:
        key = (q.id, inst)
        if key not in self._q:
            self._q[key] = query_features(inst, q, self.fcfg, self.opts)
        return self._q[key]

    def candidate(self, c: Item) -> Features:
        if c.id not in self._c:
            self._c[c.id] = candidate_features(c, self.fcfg)
        return self._c[c.id]

    def batch(self, batch: Batch) -> tuple[list[Features], list[Features]]:
        return ([self.query(ex.instruction, ex.query) for ex in batch.examples],
                [self.candidate(c) for c in batch.pool])


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, weights: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if not self.m:
            self.m = [np.zeros_like(w) for w in weights]
            self.v = [np.zeros_like(w) for w in weights]
        self.t += 1
        out = []
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, (w, g) in enumerate(zip(weights, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out.append(w - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


@dataclass(frozen=True)
class TraceRow:
    step: int
    loss: float
    stage: Stage


@dataclass(eq=False)
class TrainResult:
    params: FusionParams
    trace: list[TraceRow]

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "stage"])
    for r in trace:
        w.writerow([r.step, repr(r.loss), r.stage.value])
    return buf.getvalue()


def trace_from_csv(text: str) -> list[TraceRow]:
    return [TraceRow(int(r["step"]), float(r["loss"]), Stage(r["stage"])) for r in csv.DictReader(io.StringIO(text))]


ExampleSource = Sequence[TrainExample] | Callable[[int, np.random.Generator], Sequence[TrainExample]]


def _materialize(src: ExampleSource, epoch: int, rng: np.random.Generator) -> Sequence[TrainExample]:
    return src(epoch, rng) if callable(src) else src


def train(examples: ExampleSource, params: FusionParams, cfg: TrainConfig, stage: Stage | str,
          fcfg: FeaturizerConfig | None = None, text_examples: ExampleSource | None = None) -> TrainResult:
    """Run Adam on the InfoNCE objective starting from ``params``.

    ``examples`` may be a list or a callable ``(epoch, rng) -> list`` that draws
    fresh negatives each epoch. The caller chooses the starting point: the
    random- and hard-negative stages both start from the initial encoder, the
    continual stage from the hard-negative model. Optimizer state always starts
    fresh. ``text_examples`` is the second source mixed in by the continual stage.
    """
    stage = Stage(stage)
    fcfg = fcfg or params.featurizer()
    rng = np.random.default_rng(cfg.seed)
    cache = FeatureCache(fcfg, EncodeOptions(cfg.include_instruction))
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    W_t, W_i = params.W_t.copy(), params.W_i.copy()
    trace: list[TraceRow] = []
    step = 0

    def update(batch: Batch):
        nonlocal W_t, W_i, step
        qf, pf = cache.batch(batch)
        g = infonce_grad(qf, pf, batch.pos_index, FusionParams(W_t, W_i), cfg.tau)
        W_t, W_i = opt.step([W_t, W_i], [g.W_t, g.W_i])
        trace.append(TraceRow(step, g.loss, stage))
        step += 1

    for epoch in range(cfg.epochs):
        src = _materialize(examples, epoch, rng)
        if stage is Stage.CONTINUAL:
            if text_examples is None:
                raise EmptySource("continual stage needs text_examples")
            src_b = _materialize(text_examples, epoch, rng)
            n_steps = cfg.steps if cfg.steps is not None else (len(src) + len(src_b)) // cfg.batch_size
            for _ in range(n_steps):
                update(make_batch_mixed(src, src_b, cfg, rng))
            continue
        if stage is Stage.HARD and src and all(ex.negative is None for ex in src):
            raise ValueError("hard stage needs mined negatives on at least one example")
        make = make_batches_rand if stage is Stage.RAND else make_batches_hard
        for batch in make(src, cfg, rng):
            update(batch)
    return TrainResult(FusionParams(W_t, W_i), trace)
