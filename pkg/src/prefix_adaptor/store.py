"""Embedding and relevance-judgment storage.

Two on-disk embedding formats are supported:

* JSONL, one ``{"id": ..., "vector": [...]}`` record per line.
* A little-endian binary layout::

      magic   b"MATEMB1\\0"          8 bytes
      dim     u32
      count   u64
      ids     count x (u16 byte-length, UTF-8 bytes)
      data    count*dim float32, row-major

Relevance judgments use the TREC 4-column qrels format ``qid 0 docid grade``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    DuplicateId,
    DuplicatePair,
    FormatError,
    NegativeGrade,
    TooFewQueries,
    UnknownId,
)

MAGIC = b"MATEMB1\x00"
_HEADER = struct.Struct("<8sIQ")
_IDLEN = struct.Struct("<H")

__all__ = [
    "EmbeddingMatrix",
    "RelevanceSet",
    "DatasetSplit",
    "load_embeddings",
    "save_embeddings",
    "load_qrels",
    "save_qrels",
    "split_train_val",
    "guess_format",
]


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """N fixed vectors of dimension ``dim`` keyed by unique string ids.

    ``data`` is stored as a read-only float32 array so instances can be shared
    between workers without copying.
    """

    ids: tuple[str, ...]
    data: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimMismatch(f"expected a 2-D array, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DimMismatch("embedding dimension must be positive")
        if len(ids) != data.shape[0]:
            raise DimMismatch(f"{len(ids)} ids for {data.shape[0]} rows")
        data = np.array(data, dtype=np.float32, copy=data.dtype != np.float32 or data.flags.writeable)
        if not np.all(np.isfinite(data)):
            bad = int(np.argwhere(~np.isfinite(data))[0, 0])
            raise FormatError(f"non-finite value in row {bad} (id {ids[bad]!r})")
        index: dict[str, int] = {}
        for row, ident in enumerate(ids):
            if ident in index:
                raise DuplicateId(ident)
            index[ident] = row
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_index", index)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingMatrix":
        return cls((), np.zeros((0, dim), dtype=np.float32))

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]

    def row(self, ident: str) -> int:
        try:
            return self._index[ident]
        except KeyError:
            raise UnknownId(ident) from None

    def rows(self, idents: Iterable[str]) -> np.ndarray:
        return np.array([self.row(i) for i in idents], dtype=np.int64)

    def __contains__(self, ident: str) -> bool:
        return ident in self._index

    def subset(self, idents: Sequence[str]) -> "EmbeddingMatrix":
        return EmbeddingMatrix(tuple(idents), self.data[self.rows(idents)])


@dataclass(frozen=True)
class RelevanceSet:
    """Sparse (query id, doc id, grade) judgments. Zero grades are kept."""

    triplets: tuple[tuple[str, str, int], ...]

    def __post_init__(self):
        seen = set()
        clean = []
        for qid, did, grade in self.triplets:
            grade = int(grade)
            if grade < 0:
                raise NegativeGrade(f"({qid}, {did}) has grade {grade}")
            if (qid, did) in seen:
                raise DuplicatePair(f"({qid}, {did})")
            seen.add((qid, did))
            clean.append((str(qid), str(did), grade))
        object.__setattr__(self, "triplets", tuple(clean))

    def __len__(self) -> int:
        return len(self.triplets)

    def by_query(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for qid, did, grade in self.triplets:
            out.setdefault(qid, {})[did] = grade
        return out

    def query_ids(self) -> list[str]:
        return sorted({q for q, _, _ in self.triplets})

    def restrict(self, query_ids: Iterable[str]) -> "RelevanceSet":
        keep = set(query_ids)
        return RelevanceSet(tuple(t for t in self.triplets if t[0] in keep))


@dataclass(frozen=True)
class DatasetSplit:
    train_query_ids: frozenset[str]
    val_query_ids: frozenset[str]
    val_corpus_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = self.train_query_ids & self.val_query_ids
        if overlap:
            raise ValueError(f"train/val query overlap: {sorted(overlap)[:5]}")


def guess_format(path: str | os.PathLike) -> str:
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "binary"


def load_embeddings(
    path: str | os.PathLike,
    format: str | None = None,
    *,
    dim: int | None = None,
    mmap: bool = False,
) -> EmbeddingMatrix:
    """Read and validate an embedding file.

    ``dim`` is only consulted for JSONL files, where an empty file carries no
    dimension of its own. ``mmap`` maps the float block of a binary file
    instead of reading it (the matrix still validates every row).
    """
    format = format or guess_format(path)
    if format == "jsonl":
        return _load_jsonl(Path(path), dim)
    if format == "binary":
        return _load_binary(Path(path), mmap)
    raise FormatError(f"unknown embedding format {format!r}")


def save_embeddings(m: EmbeddingMatrix, path: str | os.PathLike, format: str | None = None) -> None:
    format = format or guess_format(path)
    path = Path(path)
    if format == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for ident, vec in zip(m.ids, m.data):
                rec = {"id": ident, "vector": [float(x) for x in vec]}
                fh.write(json.dumps(rec) + "\n")
    elif format == "binary":
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, m.dim, len(m)))
            for ident in m.ids:
                raw = ident.encode("utf-8")
                if len(raw) > 0xFFFF:
                    raise FormatError(f"id longer than 65535 bytes: {ident[:40]!r}...")
                fh.write(_IDLEN.pack(len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    else:
        raise FormatError(f"unknown embedding format {format!r}")


def _load_jsonl(path: Path, dim: int | None) -> EmbeddingMatrix:
    ids: list[str] = []
    rows: list[list[float]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ident, vec = rec["id"], rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(ident, str) or not isinstance(vec, list):
                raise FormatError(f"{path}:{lineno}: id must be a string and vector a list")
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DimMismatch(f"{path}:{lineno}: vector has {len(vec)} values, expected {dim}")
            try:
                vals = [float(v) for v in vec]
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: non-numeric vector entry") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            ids.append(ident)
            rows.append(vals)
    if dim is None:
        raise FormatError(f"{path}: empty JSONL file and no dim given")
    data = np.array(rows, dtype=np.float32).reshape(len(rows), dim)
    return EmbeddingMatrix(tuple(ids), data)


def _load_binary(path: Path, mmap: bool) -> EmbeddingMatrix:
    with path.open("rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, dim, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if dim == 0:
            raise FormatError(f"{path}: zero dimension")
        ids = []
        for _ in range(count):
            raw = fh.read(_IDLEN.size)
            if len(raw) != _IDLEN.size:
                raise FormatError(f"{path}: truncated id table")
            (n,) = _IDLEN.unpack(raw)
            name = fh.read(n)
            if len(name) != n:
                raise FormatError(f"{path}: truncated id table")
            try:
                ids.append(name.decode("utf-8"))
            except UnicodeDecodeError:
                raise FormatError(f"{path}: id is not valid UTF-8") from None
        offset = fh.tell()
    expected = offset + 4 * dim * count
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {actual}")
    if count == 0:
        data = np.zeros((0, dim), dtype=np.float32)
    elif mmap:
        data = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, dim))
    else:
        data = np.fromfile(path, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    return EmbeddingMatrix(tuple(ids), data)


def load_qrels(path: str | os.PathLike) -> RelevanceSet:
    """Parse a TREC qrels file (``qid iter docid grade`` per line)."""
    triplets = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            qid, _, did, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: grade {grade_s!r} is not an integer") from None
            if grade < 0:
                raise NegativeGrade(f"{path}:{lineno}: grade {grade}")
            if (qid, did) in seen:
                raise DuplicatePair(f"{path}:{lineno}: ({qid}, {did}) already judged")
            seen.add((qid, did))
            triplets.append((qid, did, grade))
    return RelevanceSet(tuple(triplets))


def save_qrels(rels: RelevanceSet, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, did, grade in rels.triplets:
            fh.write(f"{qid} 0 {did} {grade}\n")


def split_train_val(
    queries: EmbeddingMatrix,
    rels: RelevanceSet,
    val_fraction: float = 0.1,
    seed: int = 0,
    corpus: EmbeddingMatrix | None = None,
    corpus_fraction: float | None = None,
) -> DatasetSplit:
    """Seeded partition of query ids into train and validation sets.

    Only queries that appear in ``rels`` are split. When ``corpus`` is given,
    ``corpus_fraction`` of its rows (default: ``val_fraction``) is set aside
    as a validation corpus for early stopping and the distance diagnostics.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    corpus_fraction = val_fraction if corpus_fraction is None else corpus_fraction
    if not 0.0 < corpus_fraction < 1.0:
        raise ValueError(f"corpus_fraction must be in (0, 1), got {corpus_fraction}")
    judged = set(rels.query_ids())
    missing = judged.difference(queries.ids)
    if missing:
        raise UnknownId(f"qrels reference unknown queries: {sorted(missing)[:5]}")
    qids = [q for q in queries.ids if q in judged]
    n_val = int(round(val_fraction * len(qids)))
    if val_fraction * len(qids) < 1 or n_val < 1 or n_val >= len(qids):
        raise TooFewQueries(f"{len(qids)} queries cannot be split with val_fraction={val_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(qids))
    val = frozenset(qids[i] for i in order[:n_val])
    train = frozenset(qids[i] for i in order[n_val:])
    val_corpus: frozenset[str] = frozenset()
    if corpus is not None and len(corpus):
        n_cv = max(1, int(round(corpus_fraction * len(corpus))))
        perm = rng.permutation(len(corpus))
        val_corpus = frozenset(corpus.ids[i] for i in perm[:n_cv])
    return DatasetSplit(train, val, val_corpus)
