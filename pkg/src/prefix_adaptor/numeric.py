"""Dense numeric kernels: prefix cosine, exact kNN, PCA and nDCG."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CorpusTooSmall,
    DimMismatch,
    DuplicateDoc,
    PrefixOutOfRange,
    RankDeficientWarning,
)

NORM_EPS = 1e-12


def _as_matrix(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def cosine_prefix(a, b, m: int) -> float:
    """Cosine similarity of the first ``m`` coordinates of ``a`` and ``b``.

    Returns 0 when either prefix has norm below 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    if not 1 <= m <= a.shape[-1]:
        raise PrefixOutOfRange(f"prefix {m} outside [1, {a.shape[-1]}]")
    pa, pb = a[:m], b[:m]
    na, nb = math.sqrt(pa @ pa), math.sqrt(pb @ pb)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip((pa @ pb) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; rows with norm < 1e-12 become zero.

    Returns ``(unit_rows, norms)``.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms < NORM_EPS, np.inf, norms)
    return x / safe[:, None], norms


def prefix_cosine_matrix(a: np.ndarray, b: np.ndarray, m: int | None = None) -> np.ndarray:
    """All-pairs prefix cosine between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if m is not None:
        if not 1 <= m <= a.shape[1]:
            raise PrefixOutOfRange(f"prefix {m} outside [1, {a.shape[1]}]")
        a, b = a[:, :m], b[:, :m]
    ua, _ = normalize_rows(a)
    ub, _ = normalize_rows(b)
    return ua @ ub.T


@dataclass(frozen=True)
class NeighborTable:
    """Full-dimension cosine nearest neighbours of every row.

    ``neighbor_ids[i]`` lists row indices in non-increasing similarity order,
    ties broken by lower index; the anchor itself is never included.
    """

    k: int
    neighbor_ids: np.ndarray

    def __len__(self) -> int:
        return self.neighbor_ids.shape[0]


def topk_neighbors(corpus, k: int, *, block: int = 1024) -> NeighborTable:
    """Exact brute-force k nearest neighbours under full-dimension cosine."""
    x = _as_matrix(corpus)
    n = x.shape[0]
    if n < 2:
        raise CorpusTooSmall(f"need at least 2 rows, got {n}")
    if k < 1:
        raise ValueError("k must be positive")
    kk = min(k, n - 1)
    unit, _ = normalize_rows(x)
    out = np.empty((n, kk), dtype=np.int64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = unit[start:stop] @ unit.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        for r in range(stop - start):
            row = sims[r]
            kth = -np.partition(-row, kk - 1)[kk - 1]
            cand = np.flatnonzero(row >= kth)
            # lexsort: last key is primary
            order = np.lexsort((cand, -row[cand]))
            out[start + r] = cand[order[:kk]]
    return NeighborTable(kk, out)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    rank_deficient: bool = False

    @property
    def m_max(self) -> int:
        return int(self.components.shape[0])


def pca_fit(corpus, m_max: int, *, tol: float = 1e-10) -> PcaModel:
    """Fit PCA by eigendecomposition of the d x d covariance.

    Each component's largest-magnitude coordinate is made positive. If fewer
    than ``m_max`` eigenvalues exceed ``tol`` times the largest, the model is
    still returned with ``rank_deficient`` set and a ``RankDeficientWarning``.
    """
    x = _as_matrix(corpus)
    n, d = x.shape
    if not 1 <= m_max <= min(n, d):
        raise ValueError(f"m_max={m_max} must lie in [1, min(N, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:m_max]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    top = evals[0] if evals.size else 0.0
    deficient = bool(np.sum(evals > tol * max(top, NORM_EPS)) < m_max)
    if deficient:
        warnings.warn(
            f"covariance has fewer than {m_max} non-zero eigenvalues", RankDeficientWarning, stacklevel=2
        )
    return PcaModel(mean, comps, evals, deficient)


def pca_transform(model: PcaModel, x, m: int) -> np.ndarray:
    """Project centred ``x`` (a vector or a batch of rows) onto the first ``m`` components."""
    if not 1 <= m <= model.m_max:
        raise PrefixOutOfRange(f"prefix {m} outside [1, {model.m_max}]")
    x = _as_matrix(x)
    return (x - model.mean) @ model.components[:m].T


def dcg(grades: Sequence[int], k: int = 10) -> float:
    total = 0.0
    for rank, g in enumerate(grades[:k], start=1):
        if g > 0:
            total += (2.0 ** g - 1.0) / math.log2(rank + 1)
    return total


def ndcg_at_k(ranked_doc_ids: Sequence[str], rels: Mapping[str, int], k: int = 10) -> float:
    """nDCG@k with gain ``2**grade - 1`` and discount ``log2(rank + 1)``.

    ``rels`` maps doc id to grade for a single query; unjudged docs count as 0.
    """
    if len(set(ranked_doc_ids)) != len(ranked_doc_ids):
        raise DuplicateDoc("ranked list contains repeated doc ids")
    ideal = dcg(sorted(rels.values(), reverse=True), k)
    if ideal == 0.0:
        return 0.0
    got = dcg([rels.get(doc, 0) for doc in ranked_doc_ids], k)
    return got / ideal
