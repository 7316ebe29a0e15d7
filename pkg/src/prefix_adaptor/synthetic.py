"""Planted-subspace retrieval fixture for desk-scale experiments.

Every vector is ``R @ [signal; structured; isotropic]`` for a random rotation
``R``. A ``signal_dim``-dimensional latent carries the relevance structure;
the additive noise has a low-rank structured block (drawn independently for
every vector, so queries never share it with their relevant document) and a
small isotropic remainder. Queries are noisy copies of
randomly chosen corpus latents, and each query's single relevant document
is its nearest corpus item in the latent subspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import special_ortho_group

from .store import EmbeddingMatrix, RelevanceSet


@dataclass(frozen=True)
class PlantedSubspace:
    corpus: EmbeddingMatrix
    queries: EmbeddingMatrix
    rels: RelevanceSet
    rotation: np.ndarray
    signal_dim: int


def planted_subspace(
    n_corpus: int = 2000,
    n_queries: int = 200,
    d: int = 128,
    signal_dim: int = 8,
    noise: float = 0.02,
    structured_dim: int = 8,
    structured_scale: float = 0.2,
    query_noise: float = 0.5,
    seed: int = 0,
) -> PlantedSubspace:
    """Generate the fixture.

    Signal coordinates have unit std, the structured block has std
    ``structured_scale`` and the isotropic block std ``noise``; ``query_noise`` is the std of the latent
    perturbation that turns a source document into a query. Vectors are
    unit-normalised, as most embedding APIs return them.
    """
    if not 1 <= signal_dim or signal_dim + structured_dim >= d:
        raise ValueError("signal_dim + structured_dim must be below d")
    rng = np.random.default_rng(seed)
    rot = special_ortho_group.rvs(d, random_state=rng)
    z_c = rng.standard_normal((n_corpus, signal_dim))
    src = rng.integers(0, n_corpus, size=n_queries)
    z_q = z_c[src] + query_noise * rng.standard_normal((n_queries, signal_dim))

    def embed(z: np.ndarray) -> np.ndarray:
        n = z.shape[0]
        structured = structured_scale * rng.standard_normal((n, structured_dim))
        iso = noise * rng.standard_normal((n, d - signal_dim - structured_dim))
        v = np.hstack([z, structured, iso]) @ rot.T
        return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)

    corpus = EmbeddingMatrix(tuple(f"d{i:05d}" for i in range(n_corpus)), embed(z_c))
    queries = EmbeddingMatrix(tuple(f"q{i:04d}" for i in range(n_queries)), embed(z_q))

    uc = z_c / np.linalg.norm(z_c, axis=1, keepdims=True)
    uq = z_q / np.linalg.norm(z_q, axis=1, keepdims=True)
    best = np.argmax(uq @ uc.T, axis=1)
    rels = RelevanceSet(tuple((queries.ids[i], corpus.ids[j], 1) for i, j in enumerate(best)))
    return PlantedSubspace(corpus, queries, rels, rot, signal_dim)
