"""Prefix-similarity losses and their gradients wrt adapted embeddings.

Every loss averages (rather than sums) over pairs, prefix lengths and
queries so that unit loss weights stay meaningful for any batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import BatchTooSmall, DimMismatch, InvalidNeighborIndex, PrefixOutOfRange
from .numeric import NORM_EPS, NeighborTable, normalize_rows


@dataclass(frozen=True)
class DimSchedule:
    """Strictly increasing prefix lengths used by losses and evaluation sweeps."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(m) for m in self.dims)
        if not dims:
            raise ValueError("dimension schedule is empty")
        if dims[0] < 1 or any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"dimension schedule must be positive and strictly increasing: {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text: str) -> "DimSchedule":
        return cls(tuple(int(t) for t in text.replace(" ", "").split(",") if t))

    def check(self, d: int) -> "DimSchedule":
        if self.dims[-1] > d:
            raise PrefixOutOfRange(f"prefix {self.dims[-1]} exceeds embedding dimension {d}")
        return self

    def __iter__(self):
        return iter(self.dims)

    def __len__(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha: float = 1.0  # pairwise
    beta: float = 1.0  # reconstruction
    gamma: float = 1.0  # ranking

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class LossToggles:
    """On/off switches for each loss term, used by ablations."""

    topk: bool = True
    pair: bool = True
    rec: bool = True
    rank: bool = True

    def any_unsupervised(self) -> bool:
        return self.topk or self.pair or self.rec

    def label(self) -> str:
        off = [name for name in ("topk", "pair", "rec", "rank") if not getattr(self, name)]
        return "all" if not off else "no_" + "_".join(off)


def _dims(dims: DimSchedule | Iterable[int], d: int) -> tuple[int, ...]:
    sched = dims if isinstance(dims, DimSchedule) else DimSchedule(tuple(dims))
    return sched.check(d).dims


def _pair_arrays(orig, adapted) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(orig, dtype=np.float64)
    y = np.asarray(adapted, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise DimMismatch(f"orig {x.shape} and adapted {y.shape} must be equal 2-D shapes")
    return x, y


def _unit_prefix(y: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    unit, norms = normalize_rows(y[:, :m])
    inv = np.where(norms < NORM_EPS, 0.0, 1.0 / np.where(norms < NORM_EPS, 1.0, norms))
    return unit, inv


def similarity_gap(orig, adapted, left, right, dims) -> tuple[float, np.ndarray]:
    """Mean of |cos(x_i, x_j) - cos(y_i[:m], y_j[:m])| over listed pairs and prefixes.

    ``left``/``right`` are equal-length row-index arrays naming the pairs.
    Returns the value and its gradient wrt ``adapted``.
    """
    x, y = _pair_arrays(orig, adapted)
    ms = _dims(dims, x.shape[1])
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    grad = np.zeros_like(y)
    if left.size == 0:
        return 0.0, grad
    ux, _ = normalize_rows(x)
    target = np.einsum("ij,ij->i", ux[left], ux[right])
    scale = 1.0 / (left.size * len(ms))
    n = y.shape[0]
    rows, cols = np.concatenate([left, right]), np.concatenate([right, left])
    total = 0.0
    for m in ms:
        u, inv = _unit_prefix(y, m)
        ul, ur = u[left], u[right]
        s = np.einsum("ij,ij->i", ul, ur)
        gap = target - s
        total += np.abs(gap).sum()
        # d|gap|/ds = -sign(gap); sign(0) = 0 gives the zero subgradient at ties
        coef = np.tile(-np.sign(gap) * scale, 2)
        both = sparse.csr_matrix((coef, (rows, cols)), shape=(n, n))
        diag = np.bincount(rows, weights=coef * np.tile(s, 2), minlength=n)
        grad[:, :m] += (both @ u - diag[:, None] * u) * inv[:, None]
    return total * scale, grad


def pairwise_loss(orig, adapted, dims) -> tuple[float, np.ndarray]:
    """Similarity gap averaged over every unordered in-batch pair."""
    n = np.asarray(orig).shape[0]
    if n < 2:
        raise BatchTooSmall(f"pairwise loss needs at least 2 rows, got {n}")
    left, right = np.triu_indices(n, k=1)
    return similarity_gap(orig, adapted, left, right, dims)


def topk_loss(orig, adapted, neighbors, dims, anchors=None) -> tuple[float, np.ndarray]:
    """Similarity gap averaged over (anchor, neighbour) pairs.

    ``neighbors`` is a ``NeighborTable`` or an (A, k) array of batch row
    indices; row ``a`` lists the neighbours of ``anchors[a]`` (default: row a).
    """
    nbr = neighbors.neighbor_ids if isinstance(neighbors, NeighborTable) else np.asarray(neighbors)
    nbr = np.asarray(nbr, dtype=np.int64)
    n = np.asarray(orig).shape[0]
    if nbr.ndim != 2:
        raise InvalidNeighborIndex(f"neighbour table must be 2-D, got shape {nbr.shape}")
    anchors = np.arange(nbr.shape[0]) if anchors is None else np.asarray(anchors, dtype=np.int64)
    if anchors.shape[0] != nbr.shape[0]:
        raise InvalidNeighborIndex("one neighbour row is required per anchor")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= n) or anchors.size and (anchors.min() < 0 or anchors.max() >= n):
        raise InvalidNeighborIndex(f"neighbour index outside batch of {n} rows")
    left = np.repeat(anchors, nbr.shape[1])
    right = nbr.reshape(-1)
    return similarity_gap(orig, adapted, left, right, dims)


def rec_loss(orig, adapted) -> tuple[float, np.ndarray]:
    """Mean per-coordinate L1 distance between adapted and original rows."""
    x, y = _pair_arrays(orig, adapted)
    if x.size == 0:
        return 0.0, np.zeros_like(y)
    diff = y - x
    return float(np.abs(diff).sum() / diff.size), np.sign(diff) / diff.size


def rank_loss(query_adapted, corpus_adapted, grades, dims) -> tuple[float, np.ndarray, np.ndarray]:
    """Grade-weighted logistic pairwise ranking loss over every prefix length.

    ``grades`` is a (queries x docs) array; absent judgments are 0. The value
    is the mean over all (query, better doc, worse doc, prefix) tuples of
    ``(y_ij - y_ik) * log(1 + exp(s_ik - s_ij))``. Returns the value and the
    gradients wrt the query and doc batches.
    """
    q = np.asarray(query_adapted, dtype=np.float64)
    c = np.asarray(corpus_adapted, dtype=np.float64)
    y = np.asarray(grades, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise DimMismatch(f"query batch {q.shape} and doc batch {c.shape} are incompatible")
    if y.shape != (q.shape[0], c.shape[0]):
        raise DimMismatch(f"grade matrix {y.shape} does not match ({q.shape[0]}, {c.shape[0]})")
    ms = _dims(dims, q.shape[1])
    gq, gc = np.zeros_like(q), np.zeros_like(c)
    if y.size == 0:
        return 0.0, gq, gc
    # only (i, j) above the lowest grade of query i can outrank anything; one
    # weight row per such pair: weight[p, k] = max(y_ij - y_ik, 0) for p = (i, j)
    qi, dj = np.nonzero(y > y.min(axis=1, keepdims=True))
    weight = np.maximum(y[qi, dj][:, None] - y[qi, :], 0.0)
    count = int(np.count_nonzero(weight))
    if count == 0:
        return 0.0, gq, gc
    scale = 1.0 / (count * len(ms))
    total = 0.0
    for m in ms:
        uq, invq = _unit_prefix(q, m)
        uc, invc = _unit_prefix(c, m)
        s = uq @ uc.T
        # z[p, k] = s_ik - s_ij
        z = s[qi, :] - s[qi, dj][:, None]
        total += float(np.sum(weight * np.logaddexp(0.0, z)))
        dz = weight * expit(z) * scale
        ds = np.zeros_like(s)
        np.add.at(ds, qi, dz)
        np.add.at(ds, (qi, dj), -dz.sum(axis=1))
        gq[:, :m] += ((ds @ uc) - (ds * s).sum(axis=1)[:, None] * uq) * invq[:, None]
        gc[:, :m] += ((ds.T @ uq) - (ds * s).sum(axis=0)[:, None] * uc) * invc[:, None]
    return total * scale, gq, gc


def unsup_objective(
    orig,
    adapted,
    neighbors,
    dims,
    weights: ObjectiveWeights = ObjectiveWeights(),
    toggles: LossToggles = LossToggles(),
    anchors=None,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """``topk + alpha * pair + beta * rec`` on one corpus batch.

    Pairwise and reconstruction terms use the anchor rows only; the extra
    rows of the batch exist to supply neighbours. Returns the value, the
    gradient wrt ``adapted`` and the unweighted component values.
    """
    x, y = _pair_arrays(orig, adapted)
    rows = np.arange(x.shape[0]) if anchors is None else np.asarray(anchors, dtype=np.int64)
    grad = np.zeros_like(y)
    parts: dict[str, float] = {}
    total = 0.0
    if toggles.topk:
        val, g = topk_loss(x, y, neighbors, dims, anchors=rows)
        parts["topk"] = val
        total += val
        grad += g
    if toggles.pair and weights.alpha > 0:
        val, g = pairwise_loss(x[rows], y[rows], dims)
        parts["pair"] = val
        total += weights.alpha * val
        grad[rows] += weights.alpha * g
    if toggles.rec and weights.beta > 0:
        val, g = rec_loss(x[rows], y[rows])
        parts["rec"] = val
        total += weights.beta * val
        grad[rows] += weights.beta * g
    return total, grad, parts


def sup_objective(
    orig,
    adapted,
    neighbors,
    query_adapted,
    doc_adapted,
    grades,
    dims,
    weights: ObjectiveWeights = ObjectiveWeights(),
    toggles: LossToggles = LossToggles(),
    anchors=None,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Unsupervised objective plus ``gamma * rank``.

    Returns the value, gradients keyed ``corpus``/``query``/``doc`` and the
    unweighted component values.
    """
    if toggles.any_unsupervised():
        total, g_corpus, parts = unsup_objective(orig, adapted, neighbors, dims, weights, toggles, anchors)
    else:
        total, g_corpus, parts = 0.0, np.zeros_like(np.asarray(adapted, dtype=np.float64)), {}
    q = np.asarray(query_adapted, dtype=np.float64)
    c = np.asarray(doc_adapted, dtype=np.float64)
    g_q, g_c = np.zeros_like(q), np.zeros_like(c)
    if toggles.rank and weights.gamma > 0:
        val, gq, gc = rank_loss(q, c, grades, dims)
        parts["rank"] = val
        total += weights.gamma * val
        g_q = weights.gamma * gq
        g_c = weights.gamma * gc
    return total, {"corpus": g_corpus, "query": g_q, "doc": g_c}, parts


def grade_matrix(query_ids: Sequence[str], doc_ids: Sequence[str], by_query: dict[str, dict[str, int]]) -> np.ndarray:
    """Dense grade lookup for a query batch against a doc batch (missing = 0)."""
    out = np.zeros((len(query_ids), len(doc_ids)), dtype=np.float64)
    col = {d: j for j, d in enumerate(doc_ids)}
    for i, qid in enumerate(query_ids):
        for did, g in by_query.get(qid, {}).items():
            j = col.get(did)
            if j is not None:
                out[i, j] = g
    return out
