import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prefix_adaptor.errors import CorpusTooSmall, DuplicateDoc, PrefixOutOfRange, RankDeficientWarning
from prefix_adaptor.numeric import cosine_prefix, ndcg_at_k, pca_fit, pca_transform, topk_neighbors

vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


class TestCosinePrefix:
    def test_identical(self):
        assert cosine_prefix([1, 0, 0], [1, 0, 0], 3) == 1.0

    def test_orthogonal(self):
        r = 1 / math.sqrt(2)
        assert cosine_prefix([r, r], [r, -r], 2) == pytest.approx(0.0, abs=1e-15)

    def test_hand_prefix(self):
        # (3*4 + 4*3) / (5 * 5)
        assert cosine_prefix([3, 4, 9], [4, 3, 9], 2) == pytest.approx(0.96, abs=1e-15)

    def test_zero_prefix(self):
        assert cosine_prefix([0, 0, 1], [1, 0, 0], 2) == 0.0

    @pytest.mark.parametrize("m", [0, 4])
    def test_out_of_range(self, m):
        with pytest.raises(PrefixOutOfRange):
            cosine_prefix([1, 2, 3], [1, 2, 3], m)

    @given(vec, vec, st.integers(1, 6))
    def test_symmetric(self, a, b, m):
        assert cosine_prefix(a, b, m) == cosine_prefix(b, a, m)

    @given(vec, vec, st.integers(1, 6), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, a, b, m, c):
        assume(np.linalg.norm(a[:m]) > 1e-6 and np.linalg.norm(b[:m]) > 1e-6)
        assert cosine_prefix(c * a, b, m) == pytest.approx(cosine_prefix(a, b, m), abs=1e-6)


def brute_force_neighbors(x, k):
    """O(N^2) reference: per-pair cosine, sort by (-sim, index)."""
    n = len(x)
    out = []
    for i in range(n):
        sims = [(-cosine_prefix(x[i], x[j], x.shape[1]), j) for j in range(n) if j != i]
        out.append([j for _, j in sorted(sims)[: min(k, n - 1)]])
    return out


class TestTopkNeighbors:
    def test_three_points(self):
        x = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        t = topk_neighbors(x, 1)
        assert t.neighbor_ids.tolist() == [[1], [0], [1]]

    def test_clamped(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        t = topk_neighbors(x, 10)
        assert t.neighbor_ids.shape == (4, 3)
        for i, row in enumerate(t.neighbor_ids):
            assert i not in row

    def test_duplicate_rows_tie_break(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        t = topk_neighbors(x, 2)
        assert t.neighbor_ids.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]

    def test_too_small(self):
        with pytest.raises(CorpusTooSmall):
            topk_neighbors(np.ones((1, 3)), 1)

    @pytest.mark.parametrize("seed,n,d,k", [(0, 30, 5, 4), (1, 57, 3, 10), (2, 12, 8, 11)])
    def test_matches_brute_force(self, seed, n, d, k):
        x = np.random.default_rng(seed).standard_normal((n, d))
        t = topk_neighbors(x, k, block=7)
        assert t.neighbor_ids.tolist() == brute_force_neighbors(x, k)

    def test_similarity_non_increasing(self):
        x = np.random.default_rng(5).standard_normal((40, 6))
        t = topk_neighbors(x, 6)
        for i, row in enumerate(t.neighbor_ids):
            sims = [cosine_prefix(x[i], x[j], 6) for j in row]
            assert all(a >= b - 1e-12 for a, b in zip(sims, sims[1:]))


class TestPca:
    def test_collinear(self):
        t = np.linspace(-2, 2, 9)
        x = np.stack([t, t], axis=1)
        with pytest.warns(RankDeficientWarning):
            model = pca_fit(x, 2)
        r = 1 / math.sqrt(2)
        np.testing.assert_allclose(model.components[0], [r, r], atol=1e-12)
        assert model.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)
        assert model.rank_deficient

    def test_collinear_projection(self):
        t = np.linspace(-2, 2, 9)
        x = np.stack([t, t], axis=1) + 1.0
        with pytest.warns(RankDeficientWarning):
            model = pca_fit(x, 2)
        point = np.array([2.5, 2.5])
        # signed distance of (point - mean) along (1, 1)/sqrt(2)
        expected = (1.5 + 1.5) / math.sqrt(2)
        assert pca_transform(model, point, 1)[0] == pytest.approx(expected, abs=1e-12)

    def test_mean_maps_to_zero(self):
        x = np.random.default_rng(0).standard_normal((30, 5))
        model = pca_fit(x, 4)
        np.testing.assert_allclose(pca_transform(model, model.mean, 4), 0.0, atol=1e-15)

    def test_orthonormal(self):
        x = np.random.default_rng(1).standard_normal((50, 8))
        model = pca_fit(x, 8)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(8), atol=1e-6)
        assert not model.rank_deficient

    def test_full_rank_isometry(self):
        x = np.random.default_rng(2).standard_normal((50, 8))
        model = pca_fit(x, 8)
        z = pca_transform(model, x, 8)
        for i, j in itertools.combinations(range(50), 2):
            assert abs(np.linalg.norm(z[i] - z[j]) - np.linalg.norm(x[i] - x[j])) < 1e-5
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), np.linalg.norm(x - model.mean, axis=1), atol=1e-5)

    def test_sign_convention(self):
        x = np.random.default_rng(3).standard_normal((40, 6))
        model = pca_fit(x, 6)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0
        again = pca_fit(-x, 6)
        np.testing.assert_allclose(np.abs(again.components), np.abs(model.components), atol=1e-10)

    def test_prefix_bounds(self):
        model = pca_fit(np.random.default_rng(0).standard_normal((10, 4)), 3)
        with pytest.raises(PrefixOutOfRange):
            pca_transform(model, np.zeros(4), 4)


def reference_ndcg(grades_by_rank, all_grades, k=10):
    """Brute-force nDCG: enumerate every ordering of the judged grades for the ideal."""
    def dcg(gs):
        return sum((2**g - 1) / math.log2(i + 2) for i, g in enumerate(gs[:k]))

    ideal = max(dcg(list(p)) for p in set(itertools.permutations(all_grades)))
    return 0.0 if ideal == 0 else dcg(grades_by_rank) / ideal


class TestNdcg:
    def test_perfect(self):
        assert ndcg_at_k(["d1", "d2"], {"d1": 1}) == 1.0

    def test_no_overlap(self):
        ranked = [f"x{i}" for i in range(10)] + ["d1"]
        assert ndcg_at_k(ranked, {"d1": 2}) == 0.0

    def test_hand_example(self):
        # DCG = 3/1 + 7/log2(3); IDCG = 7/1 + 3/log2(3)
        val = ndcg_at_k(["a", "b", "c"], {"a": 2, "b": 3, "c": 0})
        dcg = 3 + 7 / math.log2(3)
        idcg = 7 + 3 / math.log2(3)
        assert dcg == pytest.approx(7.4165, abs=1e-4)
        assert idcg == pytest.approx(8.8928, abs=1e-4)
        assert val == pytest.approx(0.8340, abs=1e-4)
        assert val == pytest.approx(dcg / idcg, abs=1e-15)

    def test_no_positive(self):
        assert ndcg_at_k(["a"], {"a": 0}) == 0.0

    def test_duplicates(self):
        with pytest.raises(DuplicateDoc):
            ndcg_at_k(["a", "a"], {"a": 1})

    def test_matches_reference_random(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            grades = rng.integers(0, 4, size=n).tolist()
            docs = [f"d{i}" for i in range(n)]
            rels = dict(zip(docs, grades))
            order = rng.permutation(n)
            ranked = [docs[i] for i in order]
            expected = reference_ndcg([grades[i] for i in order], grades)
            assert abs(ndcg_at_k(ranked, rels) - expected) <= 1e-9

    @settings(max_examples=50)
    @given(st.lists(st.integers(0, 3), min_size=11, max_size=20), st.randoms())
    def test_tail_permutation_invariance(self, grades, rnd):
        docs = [f"d{i}" for i in range(len(grades))]
        rels = dict(zip(docs, grades))
        tail = docs[10:]
        rnd.shuffle(tail)
        assert ndcg_at_k(docs[:10] + tail, rels) == ndcg_at_k(docs, rels)
