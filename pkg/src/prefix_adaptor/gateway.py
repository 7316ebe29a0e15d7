"""Embedding providers: files, a deterministic mock and a JSON-over-HTTP service.

Everything downstream consumes :class:`~prefix_adaptor.store.EmbeddingMatrix`
only, so the provider behind a run is interchangeable. Returned matrices use
the input strings as row ids, which therefore have to be unique.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .errors import DimMismatch, EmptyInput, FormatError, RemoteError, UnknownId
from .store import EmbeddingMatrix, load_embeddings, save_embeddings

KINDS = ("file", "mock", "remote")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ProviderSpec:
    """Which provider to use and what it must return.

    ``config`` is the embedding file for the ``file`` kind, whose items are
    row ids; other kinds ignore it.
    """

    kind: str
    dim: int
    endpoint: str | None = None
    config: str | None = None
    mock_seed: int = 0
    batch_size: int = 64
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote provider needs an endpoint")
        if self.kind == "file" and not self.config:
            raise ValueError("file provider needs config set to an embedding file")


class MockProvider:
    """Unit-norm Gaussian vectors seeded by a digest of ``(mock_seed, text)``."""

    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self.calls = 0

    def fingerprint(self) -> str:
        return f"mock:{self.spec.dim}:{self.spec.mock_seed}"

    def vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.spec.mock_seed}\0{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        v = rng.standard_normal(self.spec.dim)
        return v / np.linalg.norm(v)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        return np.stack([self.vector(t) for t in texts]).astype(np.float32)


class FileProvider:
    """Looks items up as row ids of a stored embedding matrix."""

    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self.calls = 0
        self.path = Path(spec.config)
        self.matrix = load_embeddings(self.path)
        if self.matrix.dim != spec.dim:
            raise DimMismatch(f"{self.path} holds {self.matrix.dim}-d vectors, expected {spec.dim}")

    def fingerprint(self) -> str:
        digest = hashlib.sha256(self.path.read_bytes()).hexdigest()
        return f"file:{self.spec.dim}:{digest}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        missing = [t for t in texts if t not in self.matrix]
        if missing:
            raise UnknownId(f"{len(missing)} items not in {self.path}, e.g. {missing[0]!r}")
        return self.matrix.data[self.matrix.rows(texts)]


class RemoteProvider:
    """POSTs ``{"texts": [...]}`` and expects ``{"vectors": [[...], ...]}`` back.

    Transport failures, 429 and 5xx responses are retried with exponential
    backoff; after ``attempts`` tries a :class:`RemoteError` is raised.
    """

    def __init__(
        self,
        spec: ProviderSpec,
        client: httpx.Client | None = None,
        *,
        attempts: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.spec = spec
        self.client = client or httpx.Client(timeout=spec.timeout)
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.calls = 0

    def fingerprint(self) -> str:
        return f"remote:{self.spec.dim}:{self.spec.endpoint}"

    def _post(self, texts: list[str]) -> dict:
        last = "no attempt made"
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self.calls += 1
            try:
                resp = self.client.post(self.spec.endpoint, json={"texts": texts})
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise RemoteError(f"{self.spec.endpoint} rejected the request: HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError as exc:
                raise RemoteError(f"{self.spec.endpoint} returned invalid JSON") from exc
        raise RemoteError(f"{self.spec.endpoint} failed after {self.attempts} attempts ({last})")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        doc = self._post(list(texts))
        vectors = doc.get("vectors") if isinstance(doc, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise RemoteError(f"expected {len(texts)} vectors in the response")
        try:
            arr = np.asarray(vectors, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise RemoteError("response vectors are not numeric") from exc
        if arr.ndim != 2 or arr.shape[1] != self.spec.dim:
            got = arr.shape[1] if arr.ndim == 2 else "ragged"
            raise DimMismatch(f"provider returned {got}-d vectors, expected {self.spec.dim}")
        if not np.isfinite(arr).all():
            raise RemoteError("response contains non-finite values")
        return arr.astype(np.float32)


def make_provider(spec: ProviderSpec, **kwargs):
    """Instantiate the provider for ``spec``; extra kwargs go to the remote client."""
    if spec.kind == "mock":
        return MockProvider(spec)
    if spec.kind == "file":
        return FileProvider(spec)
    return RemoteProvider(spec, **kwargs)


def _check_items(items: Sequence[str]) -> list[str]:
    items = list(items)
    if not items:
        raise EmptyInput("no items to embed")
    return items


def _batches(items: list[str], size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def embed_texts(spec: ProviderSpec, items: Sequence[str], *, provider=None) -> EmbeddingMatrix:
    """Embed ``items`` in batches of ``spec.batch_size``."""
    items = _check_items(items)
    provider = provider or make_provider(spec)
    parts = [provider.embed(b) for b in _batches(items, spec.batch_size)]
    return EmbeddingMatrix(tuple(items), np.vstack(parts))


def _batch_key(fingerprint: str, batch: list[str]) -> str:
    h = hashlib.sha256(fingerprint.encode("utf-8"))
    for item in batch:
        h.update(b"\0")
        h.update(hashlib.sha256(item.encode("utf-8")).digest())
    return h.hexdigest()


def _atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def cache_embeddings(
    spec: ProviderSpec, items: Sequence[str], cache_path: str | os.PathLike, *, provider=None
) -> EmbeddingMatrix:
    """Embed ``items`` through a content-addressed on-disk cache.

    Each batch is stored as ``<digest>.bin`` in ``cache_path``, where the
    digest covers the provider fingerprint and every item in the batch, and
    ``manifest.json`` lists the stored batches. Cached batches are read back
    without touching the provider.
    """
    items = _check_items(items)
    cache = Path(cache_path)
    cache.mkdir(parents=True, exist_ok=True)
    provider = provider or make_provider(spec)
    fingerprint = provider.fingerprint()
    manifest_path = cache / MANIFEST
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
    parts = []
    dirty = False
    for batch in _batches(items, spec.batch_size):
        key = _batch_key(fingerprint, batch)
        path = cache / f"{key}.bin"
        if path.exists():
            stored = load_embeddings(path, "binary")
            if stored.dim != spec.dim:
                raise DimMismatch(f"cached batch {path.name} is {stored.dim}-d, expected {spec.dim}")
            if stored.ids != tuple(batch):
                raise FormatError(f"cached batch {path.name} does not hold the requested items")
            parts.append(stored.data)
            continue
        block = EmbeddingMatrix(tuple(batch), provider.embed(batch))
        _atomic_write(path, lambda p: save_embeddings(block, p, "binary"))
        manifest[key] = {"fingerprint": fingerprint, "count": len(batch), "dim": spec.dim}
        dirty = True
        parts.append(block.data)
    if dirty:
        _atomic_write(manifest_path, lambda p: p.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"))
    return EmbeddingMatrix(tuple(items), np.vstack(parts))
