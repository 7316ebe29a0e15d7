"""Adam-based training of the residual adaptor.

Stage 1 (unsupervised) fits the prefix-similarity objective on corpus
embeddings alone. Stage 2 (supervised) continues from the stage-1 weights
and adds the ranking loss over query/doc judgments. Both stages early-stop
on a validation signal and return the best checkpoint seen.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .adaptor import MlpAdaptor, adapt, adapt_backward, init_adaptor
from .errors import CorpusTooSmall, NoPositivePairs, UnknownId
from .losses import (
    DimSchedule,
    LossToggles,
    ObjectiveWeights,
    grade_matrix,
    sup_objective,
    unsup_objective,
)
from .numeric import topk_neighbors
from .store import DatasetSplit, EmbeddingMatrix, RelevanceSet

log = logging.getLogger(__name__)


def default_dims(d: int) -> DimSchedule:
    """Powers of two from 8 up to ``d``, plus ``d`` itself."""
    dims = []
    m = 8
    while m < d:
        dims.append(m)
        m *= 2
    dims.append(d)
    return DimSchedule(tuple(dims))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    corpus_batch_size: int = 50000
    max_iters: int = 5000
    patience: int = 500
    k_neighbors: int = 10
    dims: DimSchedule | None = None
    weights: ObjectiveWeights = ObjectiveWeights()
    seed: int = 0
    loss_toggles: LossToggles = LossToggles()
    hidden_dim: int | None = None
    activation: str = "tanh"
    val_fraction: float = 0.1
    eval_every: int = 10
    max_val_rows: int = 1000

    def __post_init__(self):
        for name in ("batch_size", "corpus_batch_size", "max_iters", "patience", "k_neighbors", "eval_every", "max_val_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def resolve_dims(self, d: int) -> DimSchedule:
        return (self.dims or default_dims(d)).check(d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims.dims) if self.dims else None
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if doc.get("dims") is not None:
            doc["dims"] = DimSchedule(tuple(doc["dims"]))
        if "weights" in doc:
            doc["weights"] = ObjectiveWeights(**doc["weights"])
        if "loss_toggles" in doc:
            doc["loss_toggles"] = LossToggles(**doc["loss_toggles"])
        return cls(**doc)


@dataclass
class TrainRecord:
    iter: int
    stage: str
    train_loss: float | None
    val_metric: float | None = None


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    best_iter: int = 0
    best_metric: float | None = None
    stop_reason: str = ""

    def losses(self, stage: str | None = None) -> list[float]:
        return [r.train_loss for r in self.records if r.train_loss is not None and (stage is None or r.stage == stage)]

    def val_curve(self, stage: str | None = None) -> list[tuple[int, float]]:
        return [
            (r.iter, r.val_metric)
            for r in self.records
            if r.val_metric is not None and (stage is None or r.stage == stage)
        ]

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.best_iter = other.best_iter
        self.best_metric = other.best_metric
        self.stop_reason = other.stop_reason

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec)) + "\n")
            fh.write(
                json.dumps({"best_iter": self.best_iter, "best_metric": self.best_metric, "stop_reason": self.stop_reason})
                + "\n"
            )


@dataclass
class AdamState:
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays and state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {np.shape(p)}")
        m = b1 * state.first_moment.get(name, np.zeros_like(g)) + (1.0 - b1) * g
        v = b2 * state.second_moment.get(name, np.zeros_like(g)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new, b1, b2, state.epsilon)


def _apply(f: MlpAdaptor, params: dict[str, np.ndarray]) -> MlpAdaptor:
    return MlpAdaptor(params["w1"], params["b1"], params["w2"], params["b2"], f.activation)


class _CorpusSampler:
    """Cycles seeded anchor minibatches through fixed corpus batches.

    Corpus rows are shuffled once into batches of ``corpus_batch_size``; the
    full-dimension neighbour table of each batch is computed on first use and
    kept, since the original embeddings never change.
    """

    def __init__(self, x: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
        self.x = x
        self.cfg = cfg
        self.rng = rng
        order = rng.permutation(x.shape[0])
        cbs = cfg.corpus_batch_size
        self.batches = [np.sort(order[i : i + cbs]) for i in range(0, len(order), cbs)]
        # a short trailing batch cannot supply k neighbours; fold it into the previous one
        if len(self.batches) > 1 and len(self.batches[-1]) < cfg.k_neighbors + 1:
            tail = self.batches.pop()
            self.batches[-1] = np.sort(np.concatenate([self.batches[-1], tail]))
        self.tables: dict[int, np.ndarray] = {}
        self._stream = self._anchors()

    def table(self, b: int) -> np.ndarray:
        if b not in self.tables:
            rows = self.batches[b]
            self.tables[b] = rows[topk_neighbors(self.x[rows], self.cfg.k_neighbors).neighbor_ids]
        return self.tables[b]

    def _anchors(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        b = 0
        while True:
            rows = self.batches[b]
            table = self.table(b)
            perm = self.rng.permutation(len(rows))
            for i in range(0, len(perm), self.cfg.batch_size):
                local = perm[i : i + self.cfg.batch_size]
                if len(local) < 2 and len(perm) >= 2:
                    continue
                yield rows[local], table[local]
            b = (b + 1) % len(self.batches)

    def next(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (batch rows, local neighbour indices, anchor count)."""
        anchors, nbrs = next(self._stream)
        extra = np.setdiff1d(np.unique(nbrs), anchors)
        rows = np.concatenate([anchors, extra])
        pos = {int(r): i for i, r in enumerate(rows)}
        local = np.vectorize(pos.__getitem__, otypes=[np.int64])(nbrs)
        return rows, local, len(anchors)


class _UnsupValidator:
    """Held-out unsupervised objective on a fixed validation corpus."""

    def __init__(self, x_val: np.ndarray, cfg: TrainConfig, dims: DimSchedule):
        self.x = x_val
        self.cfg = cfg
        self.dims = dims
        self.neighbors = topk_neighbors(x_val, cfg.k_neighbors).neighbor_ids

    def __call__(self, f: MlpAdaptor) -> float:
        y = adapt(f, self.x)
        val, _, _ = unsup_objective(self.x, y, self.neighbors, self.dims, self.cfg.weights, self.cfg.loss_toggles)
        return val


def _holdout(n: int, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(cfg.val_fraction * n))
    n_val = min(n_val, cfg.max_val_rows)
    if n_val < cfg.k_neighbors + 1 or n - n_val < cfg.k_neighbors + 1:
        all_rows = np.arange(n)
        return all_rows, all_rows
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _unsup_active(cfg: TrainConfig) -> bool:
    t, w = cfg.loss_toggles, cfg.weights
    return t.topk or (t.pair and w.alpha > 0) or (t.rec and w.beta > 0)


def train_unsupervised(
    corpus: EmbeddingMatrix,
    cfg: TrainConfig = TrainConfig(),
    *,
    val_corpus: EmbeddingMatrix | None = None,
    init: MlpAdaptor | None = None,
) -> tuple[MlpAdaptor, TrainLog]:
    """Fit the adaptor on corpus embeddings with the prefix-similarity objective.

    Without ``val_corpus``, a seeded ``val_fraction`` of the corpus (capped at
    ``max_val_rows``) is held out for early stopping. The returned adaptor is
    the checkpoint with the lowest validation objective, which may be the
    identity initialisation itself.
    """
    x_all = np.asarray(corpus.data, dtype=np.float64)
    n, d = x_all.shape
    if n < cfg.k_neighbors + 1:
        raise CorpusTooSmall(f"corpus of {n} rows cannot supply {cfg.k_neighbors} neighbours")
    dims = cfg.resolve_dims(d)
    rng = np.random.default_rng(cfg.seed)
    f = init.copy() if init is not None else init_adaptor(d, cfg.hidden_dim, cfg.seed, cfg.activation)
    trace = TrainLog()
    if not _unsup_active(cfg):
        trace.stop_reason = "no_active_loss"
        return f, trace

    if val_corpus is not None:
        x_train, x_val = x_all, np.asarray(val_corpus.data, dtype=np.float64)
        if x_val.shape[0] > cfg.max_val_rows:
            x_val = x_val[np.sort(rng.permutation(x_val.shape[0])[: cfg.max_val_rows])]
        if x_val.shape[0] < cfg.k_neighbors + 1:
            raise CorpusTooSmall("validation corpus smaller than k_neighbors + 1")
    else:
        train_rows, val_rows = _holdout(n, cfg, rng)
        x_train, x_val = x_all[train_rows], x_all[val_rows]

    sampler = _CorpusSampler(x_train, cfg, rng)
    validate = _UnsupValidator(x_val, cfg, dims)
    best, best_iter = validate(f), 0
    best_f = f.copy()
    trace.records.append(TrainRecord(0, "unsup", None, best))
    params, state = f.params(), AdamState()
    stop = "max_iters"
    for it in range(1, cfg.max_iters + 1):
        rows, local_nbrs, n_anchor = sampler.next()
        xb = x_train[rows]
        yb = adapt(f, xb)
        loss, g_y, _ = unsup_objective(
            xb, yb, local_nbrs, dims, cfg.weights, cfg.loss_toggles, anchors=np.arange(n_anchor)
        )
        grads, _ = adapt_backward(f, xb, g_y)
        params, state = adam_step(params, grads, state, cfg.learning_rate)
        f = _apply(f, params)
        rec = TrainRecord(it, "unsup", float(loss))
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            rec.val_metric = validate(f)
            if rec.val_metric < best:
                best, best_iter, best_f = rec.val_metric, it, f.copy()
        trace.records.append(rec)
        if it - best_iter >= cfg.patience:
            stop = "patience"
            break
    trace.best_iter, trace.best_metric, trace.stop_reason = best_iter, best, stop
    log.info("unsupervised stage stopped (%s) at best iter %d, val objective %.6f", stop, best_iter, best)
    return best_f, trace


def _validation_ndcg(
    f: MlpAdaptor,
    x_corpus: np.ndarray,
    corpus_ids: tuple[str, ...],
    x_queries: np.ndarray,
    query_ids: list[str],
    by_query: dict[str, dict[str, int]],
    dims: DimSchedule,
) -> float:
    from .evaluator import mean_ndcg

    yc = adapt(f, x_corpus)
    yq = adapt(f, x_queries)
    return float(np.mean([mean_ndcg(yq, yc, query_ids, corpus_ids, by_query, m) for m in dims]))


def train_supervised(
    corpus: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    rels: RelevanceSet,
    split: DatasetSplit,
    cfg: TrainConfig = TrainConfig(),
    *,
    stage1: tuple[MlpAdaptor, TrainLog] | None = None,
) -> tuple[MlpAdaptor, TrainLog]:
    """Two-stage training: unsupervised warm start, then the ranking objective.

    Stage 2 restarts Adam from fresh moments, samples ``batch_size`` training
    queries per step (their judged docs form the candidate set, so every
    other query's docs act as in-batch negatives) and early-stops on
    validation nDCG@10 averaged over the prefix schedule. Corpus rows listed
    in ``split.val_corpus_ids`` stay out of both stages' unsupervised terms
    and act as the stage-1 validation corpus. ``stage1`` may pass in an
    already trained stage-1 result.
    """
    x_c = np.asarray(corpus.data, dtype=np.float64)
    d = x_c.shape[1]
    dims = cfg.resolve_dims(d)
    by_query = rels.by_query()
    for qid in split.train_query_ids | split.val_query_ids:
        if qid not in queries:
            raise UnknownId(f"query {qid!r} not in query matrix")
    for qid, docs in by_query.items():
        for did in docs:
            if did not in corpus:
                raise UnknownId(f"doc {did!r} (query {qid!r}) not in corpus")
    train_q = sorted(split.train_query_ids)
    lacking = [q for q in train_q if not any(g > 0 for g in by_query.get(q, {}).values())]
    if not train_q or lacking:
        raise NoPositivePairs(f"training queries without a positive judgment: {lacking[:5]}")
    val_q = sorted(q for q in split.val_query_ids if any(g > 0 for g in by_query.get(q, {}).values()))

    # corpus rows held out by the split never feed the unsupervised terms
    held_out = split.val_corpus_ids
    train_rows = np.array([i for i, did in enumerate(corpus.ids) if did not in held_out], dtype=np.int64)
    if held_out and len(held_out) >= cfg.k_neighbors + 1 and len(train_rows) >= cfg.k_neighbors + 1:
        train_corpus, val_corpus = corpus.subset([corpus.ids[i] for i in train_rows]), corpus.subset(sorted(held_out))
    else:
        train_rows, train_corpus, val_corpus = np.arange(len(corpus)), corpus, None
    if stage1 is None:
        stage1 = train_unsupervised(train_corpus, cfg, val_corpus=val_corpus)
    f, trace = stage1[0].copy(), TrainLog(list(stage1[1].records))

    rng = np.random.default_rng([cfg.seed, 2])
    unsup_on = _unsup_active(cfg)
    x_train = x_c[train_rows]
    sampler = _CorpusSampler(x_train, cfg, rng) if unsup_on else None
    x_q = np.asarray(queries.data, dtype=np.float64)
    q_rows = {q: queries.row(q) for q in train_q}
    x_qval = x_q[queries.rows(val_q)] if val_q else x_q[:0]

    def validate(model: MlpAdaptor) -> float:
        if not val_q:
            return 0.0
        return _validation_ndcg(model, x_c, corpus.ids, x_qval, val_q, by_query, dims)

    best, best_iter = validate(f), 0
    best_f = f.copy()
    offset = stage1[1].records[-1].iter if stage1[1].records else 0
    trace.records.append(TrainRecord(offset, "sup", None, best))
    params, state = f.params(), AdamState()
    stop = "max_iters"

    def query_batches() -> Iterator[list[str]]:
        while True:
            perm = rng.permutation(len(train_q))
            for i in range(0, len(perm), cfg.batch_size):
                yield [train_q[j] for j in perm[i : i + cfg.batch_size]]

    stream = query_batches()
    for it in range(1, cfg.max_iters + 1):
        qb = next(stream)
        docs = sorted({did for q in qb for did in by_query[q]})
        grades = grade_matrix(qb, docs, by_query)
        xq_b = x_q[[q_rows[q] for q in qb]]
        xd_b = x_c[corpus.rows(docs)]
        if sampler is not None:
            rows, local_nbrs, n_anchor = sampler.next()
            xc_b = x_train[rows]
        else:
            local_nbrs, n_anchor = np.zeros((0, 1), dtype=np.int64), 0
            xc_b = x_c[:0]
        yc_b, yq_b, yd_b = adapt(f, xc_b), adapt(f, xq_b), adapt(f, xd_b)
        loss, g, _ = sup_objective(
            xc_b, yc_b, local_nbrs, yq_b, yd_b, grades, dims, cfg.weights, cfg.loss_toggles,
            anchors=np.arange(n_anchor),
        )
        grads, _ = adapt_backward(f, xq_b, g["query"])
        gd, _ = adapt_backward(f, xd_b, g["doc"])
        for k in grads:
            grads[k] = grads[k] + gd[k]
        if sampler is not None:
            gc, _ = adapt_backward(f, xc_b, g["corpus"])
            for k in grads:
                grads[k] = grads[k] + gc[k]
        params, state = adam_step(params, grads, state, cfg.learning_rate)
        f = _apply(f, params)
        rec = TrainRecord(offset + it, "sup", float(loss))
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            rec.val_metric = validate(f)
            if rec.val_metric > best:
                best, best_iter, best_f = rec.val_metric, it, f.copy()
        trace.records.append(rec)
        if it - best_iter >= cfg.patience:
            stop = "patience"
            break
    trace.best_iter, trace.best_metric, trace.stop_reason = offset + best_iter, best, stop
    log.info("supervised stage stopped (%s) at best iter %d, val nDCG@10 %.4f", stop, best_iter, best)
    return best_f, trace
