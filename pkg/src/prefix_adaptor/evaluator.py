"""Retrieval evaluation over a prefix-length sweep, plus distance diagnostics."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adaptor import MlpAdaptor, adapt
from .errors import CorpusTooSmall, PrefixOutOfRange, UnknownId, UnknownMethod
from .losses import DimSchedule, LossToggles
from .numeric import PcaModel, ndcg_at_k, normalize_rows, pca_transform, topk_neighbors
from .store import EmbeddingMatrix, RelevanceSet

METHODS = ("baseline", "pca", "adaptor")
CSV_FIELDS = ("method", "dim", "ndcg10", "pairwise_dist", "topk_dist")
EXACT_PAIR_LIMIT = 10_000_000
SAMPLED_PAIRS = 100_000


@dataclass
class ReportRow:
    method: str
    dim: int
    ndcg10: float
    pairwise_dist: float | None = None
    topk_dist: float | None = None


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def get(self, method: str, dim: int) -> ReportRow:
        for row in self.rows:
            if row.method == method and row.dim == dim:
                return row
        raise KeyError((method, dim))

    def ndcg(self, method: str) -> dict[int, float]:
        return {r.dim: r.ndcg10 for r in self.rows if r.method == method}

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for r in self.rows:
                writer.writerow([r.method, r.dim, repr(r.ndcg10), _fmt(r.pairwise_dist), _fmt(r.topk_dist)])

    def to_json(self, path: str | os.PathLike) -> None:
        doc = {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [
                ReportRow(
                    rec["method"], int(rec["dim"]), float(rec["ndcg10"]),
                    _parse(rec["pairwise_dist"]), _parse(rec["topk_dist"]),
                )
                for rec in csv.DictReader(fh)
            ]
        return cls(rows)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls([ReportRow(**r) for r in doc["rows"]], doc.get("metadata", {}))


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def _parse(s: str) -> float | None:
    return None if s == "" else float(s)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def apply_transform(transform, x: np.ndarray) -> np.ndarray:
    """Map rows of ``x`` through identity (``None``), a PCA model or an adaptor."""
    if transform is None or (isinstance(transform, str) and transform == "identity"):
        return np.asarray(x, dtype=np.float64)
    if isinstance(transform, PcaModel):
        return pca_transform(transform, x, transform.m_max)
    if isinstance(transform, MlpAdaptor):
        return adapt(transform, x)
    raise TypeError(f"unsupported transform {type(transform).__name__}")


def _top_k(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, ties broken by ascending ``id_rank``."""
    n = scores.shape[0]
    if n <= k:
        return np.lexsort((id_rank, -scores))
    kth = -np.partition(-scores, k - 1)[k - 1]
    cand = np.flatnonzero(scores >= kth)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def mean_ndcg(
    query_vecs: np.ndarray,
    corpus_vecs: np.ndarray,
    query_ids: Sequence[str],
    doc_ids: Sequence[str],
    by_query: Mapping[str, Mapping[str, int]],
    m: int,
    k: int = 10,
) -> float:
    """Mean nDCG@k of prefix-cosine retrieval over the given queries.

    ``query_vecs`` rows align with ``query_ids``; ``corpus_vecs`` rows align
    with ``doc_ids``. Equal scores are ordered by doc id.
    """
    if not query_ids:
        return 0.0
    if not 1 <= m <= corpus_vecs.shape[1]:
        raise PrefixOutOfRange(f"prefix {m} outside [1, {corpus_vecs.shape[1]}]")
    uq, _ = normalize_rows(np.asarray(query_vecs, dtype=np.float64)[:, :m])
    uc, _ = normalize_rows(np.asarray(corpus_vecs, dtype=np.float64)[:, :m])
    id_rank = np.empty(len(doc_ids), dtype=np.int64)
    id_rank[np.argsort(np.array(doc_ids, dtype=object), kind="stable")] = np.arange(len(doc_ids))
    scores = uq @ uc.T
    total = 0.0
    for i, qid in enumerate(query_ids):
        top = _top_k(scores[i], id_rank, k)
        total += ndcg_at_k([doc_ids[j] for j in top], by_query.get(qid, {}), k)
    return total / len(query_ids)


def evaluate_retrieval(
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    rels: RelevanceSet,
    transform,
    dims: DimSchedule,
    *,
    method: str | None = None,
    query_ids: Sequence[str] | None = None,
) -> list[ReportRow]:
    """nDCG@10 at each prefix length after transforming queries and corpus alike.

    Evaluated queries are those with at least one positive judgment
    (optionally intersected with ``query_ids``).
    """
    by_query = rels.by_query()
    for qid, docs in by_query.items():
        if qid not in queries:
            raise UnknownId(f"qrels query {qid!r} not in query matrix")
        for did in docs:
            if did not in corpus:
                raise UnknownId(f"qrels doc {did!r} not in corpus")
    judged = [q for q in queries.ids if any(g > 0 for g in by_query.get(q, {}).values())]
    if query_ids is not None:
        keep = set(query_ids)
        judged = [q for q in judged if q in keep]
    if method is None:
        method = "baseline" if transform is None else "pca" if isinstance(transform, PcaModel) else "adaptor"
    tq = apply_transform(transform, queries.data[queries.rows(judged)] if judged else queries.data[:0])
    tc = apply_transform(transform, corpus.data)
    rows = []
    for m in dims:
        rows.append(ReportRow(method, m, mean_ndcg(tq, tc, judged, corpus.ids, by_query, m)))
    return rows


def _gap_mean(orig_unit: np.ndarray, t: np.ndarray, left: np.ndarray, right: np.ndarray, m: int) -> float:
    if left.size == 0:
        return 0.0
    full = np.einsum("ij,ij->i", orig_unit[left], orig_unit[right])
    u, _ = normalize_rows(t[:, :m])
    pref = np.einsum("ij,ij->i", u[left], u[right])
    return float(np.mean(np.abs(full - pref)))


def distance_diagnostics(
    corpus_val: EmbeddingMatrix,
    transform,
    dims: DimSchedule,
    k: int = 10,
    *,
    seed: int = 0,
    max_exact_pairs: int = EXACT_PAIR_LIMIT,
    n_samples: int = SAMPLED_PAIRS,
) -> dict:
    """Label-free prefix diagnostics on a held-out corpus.

    For each prefix length ``m``: the mean absolute gap between full-dimension
    cosine of the original vectors and prefix cosine of the transformed
    vectors, over all pairs (``pairwise``) and over full-dimension kNN pairs
    (``topk``). Pairs are sampled with ``seed`` once N^2 exceeds
    ``max_exact_pairs``.
    """
    x = np.asarray(corpus_val.data, dtype=np.float64)
    n = x.shape[0]
    if n < k + 1:
        raise CorpusTooSmall(f"{n} rows cannot supply {k} neighbours")
    t = apply_transform(transform, x)
    for m in dims:
        if m > t.shape[1]:
            raise PrefixOutOfRange(f"prefix {m} exceeds transformed dimension {t.shape[1]}")
    unit, _ = normalize_rows(x)
    sampled = n * n > max_exact_pairs
    if sampled:
        rng = np.random.default_rng(seed)
        left = rng.integers(0, n, size=n_samples)
        right = (left + rng.integers(1, n, size=n_samples)) % n
    else:
        left, right = np.triu_indices(n, k=1)
    nbr = topk_neighbors(x, k).neighbor_ids
    kl, kr = np.repeat(np.arange(n), nbr.shape[1]), nbr.reshape(-1)
    return {
        "pairwise": {m: _gap_mean(unit, t, left, right, m) for m in dims},
        "topk": {m: _gap_mean(unit, t, kl, kr, m) for m in dims},
        "sampled": sampled,
        "n_pairs": int(left.size),
        "seed": seed,
    }


def build_report(
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    rels: RelevanceSet,
    dims: DimSchedule,
    methods: Sequence[str] = ("baseline",),
    *,
    adaptor: MlpAdaptor | None = None,
    pca: PcaModel | None = None,
    diagnostics_corpus: EmbeddingMatrix | None = None,
    k: int = 10,
    seed: int = 0,
    metadata: dict | None = None,
) -> EvalReport:
    """Evaluate several methods into one report.

    PCA is fit on the corpus when ``pca`` is not supplied. Distance columns
    are filled when ``diagnostics_corpus`` is given.
    """
    from .numeric import pca_fit

    report = EvalReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("seed", seed)
    for method in methods:
        if method not in METHODS:
            raise UnknownMethod(method)
        if method == "baseline":
            transform = None
        elif method == "pca":
            pca = pca or pca_fit(corpus, min(max(dims), len(corpus), corpus.dim))
            transform = pca
        else:
            if adaptor is None:
                raise UnknownMethod("adaptor method requested without adaptor weights")
            transform = adaptor
        rows = evaluate_retrieval(queries, corpus, rels, transform, dims, method=method)
        if diagnostics_corpus is not None:
            diag = distance_diagnostics(diagnostics_corpus, transform, dims, k, seed=seed)
            for r in rows:
                r.pairwise_dist, r.topk_dist = diag["pairwise"][r.dim], diag["topk"][r.dim]
        report.rows.extend(rows)
    return report


ABLATION_GRID = (
    LossToggles(),
    LossToggles(topk=False),
    LossToggles(pair=False),
    LossToggles(rec=False),
)


def run_ablation(
    corpus: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    rels: RelevanceSet,
    cfg,
    grid: Sequence[LossToggles] = ABLATION_GRID,
    *,
    split=None,
    supervised: bool = False,
) -> dict[str, EvalReport]:
    """Train one adaptor per toggle setting and evaluate each on the sweep.

    Returns ``{toggle label: report}``; every report also carries the
    baseline rows so blocks can be compared side by side.
    """
    from dataclasses import replace

    from .trainer import train_supervised, train_unsupervised

    dims = cfg.resolve_dims(corpus.dim)
    eval_q = sorted(split.val_query_ids) if split is not None and supervised else None
    baseline = evaluate_retrieval(queries, corpus, rels, None, dims, method="baseline", query_ids=eval_q)
    out: dict[str, EvalReport] = {}
    for toggles in grid:
        run_cfg = replace(cfg, loss_toggles=toggles)
        if supervised:
            f, trace = train_supervised(corpus, queries, rels, split, run_cfg)
        else:
            f, trace = train_unsupervised(corpus, run_cfg)
        rows = evaluate_retrieval(queries, corpus, rels, f, dims, method="adaptor", query_ids=eval_q)
        meta = {"toggles": asdict(toggles), "seed": cfg.seed, "best_iter": trace.best_iter,
                "config_hash": config_hash(run_cfg.to_dict())}
        out[toggles.label()] = EvalReport([ReportRow(**asdict(r)) for r in baseline] + rows, meta)
    return out


def ablation_table(results: Mapping[str, EvalReport]) -> list[dict]:
    """Flatten ablation reports into one row per setting (plus baseline)."""
    table = []
    first = next(iter(results.values()), None)
    if first is not None:
        table.append({"setting": "baseline", **{str(d): v for d, v in first.ndcg("baseline").items()}})
    for label, rep in results.items():
        table.append({"setting": label, **{str(d): v for d, v in rep.ndcg("adaptor").items()}})
    return table

