import itertools

import numpy as np
import pytest

from falformer.clustering import (
    SegmentAssignment,
    contiguous_assignment,
    kmeans,
    segment_means,
    segment_means_backward,
)
from falformer.errors import ClusteringError, ShapeError


def exhaustive_min_wcss(x, k):
    """Global WCSS optimum over all labelings with exactly ``k`` non-empty groups."""
    n = len(x)
    best = np.inf
    # fix token 0 in group 0 to halve the symmetric search
    for rest in itertools.product(range(k), repeat=n - 1):
        labels = np.array((0,) + rest)
        if len(np.unique(labels)) != k:
            continue
        total = 0.0
        for g in range(k):
            pts = x[labels == g]
            total += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, total)
    return best


def groupby_mean(x, ids):
    out = {}
    for row, i in zip(x, ids):
        out.setdefault(int(i), []).append(row)
    return np.array([np.mean(out[g], axis=0) for g in sorted(out)])


class TestKMeans:
    def test_one_dimensional_example(self):
        x = np.array([[0.0], [0.1], [10.0], [10.1]])
        a = kmeans(x, 2, seed=0)
        assert a.ids[0] == a.ids[1] and a.ids[2] == a.ids[3] and a.ids[0] != a.ids[2]
        np.testing.assert_allclose(sorted(a.centroids[:, 0]), [0.05, 10.05], atol=1e-12)
        assert a.wcss == pytest.approx(exhaustive_min_wcss(x, 2), abs=1e-12)

    def test_k_equals_n_singletons(self, rng):
        x = rng.normal(size=(9, 3))
        a = kmeans(x, 9)
        assert a.n_segments == 9
        assert (a.counts == 1).all()
        assert a.wcss == 0.0

    def test_k_above_n_capped(self, rng):
        a = kmeans(rng.normal(size=(5, 2)), 256)
        assert a.n_segments == 5

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_identical_tokens_collapse(self, k):
        a = kmeans(np.ones((10, 4)), k, seed=k)
        assert a.n_segments == 1
        assert a.wcss == 0.0
        assert (a.ids == 0).all()

    def test_zero_tokens_rejected(self):
        with pytest.raises(ClusteringError):
            kmeans(np.zeros((0, 3)), 2)

    def test_invariants(self, rng):
        x = rng.normal(size=(50, 4))
        a = kmeans(x, 6, seed=3)
        assert a.counts.sum() == 50
        assert (a.counts >= 1).all()
        assert a.ids.min() == 0 and a.ids.max() == a.n_segments - 1
        # every token sits at its nearest centroid at the fixpoint
        d = ((x[:, None, :] - a.centroids[None]) ** 2).sum(-1)
        if a.n_iter < 50:
            np.testing.assert_array_equal(d.argmin(1), a.ids)

    def test_wcss_monotone(self):
        for seed in range(30):
            r = np.random.default_rng(seed)
            x = r.normal(size=(40, 3))
            a = kmeans(x, 5, seed=seed)
            hist = np.array(a.wcss_history)
            assert (np.diff(hist) <= 1e-9 * hist[0]).all(), hist

    def test_deterministic(self, rng):
        x = rng.normal(size=(30, 5))
        a, b = kmeans(x, 4, seed=11), kmeans(x, 4, seed=11)
        np.testing.assert_array_equal(a.ids, b.ids)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_near_optimal_small(self):
        for seed in range(20):
            r = np.random.default_rng(100 + seed)
            n, k = int(r.integers(4, 10)), int(r.integers(2, 4))
            x = r.normal(size=(n, 2))
            a = kmeans(x, k, seed=seed, restarts=5)
            assert a.wcss <= 1.05 * exhaustive_min_wcss(x, a.n_segments) + 1e-12


class TestSegmentMeans:
    def test_singletons_return_rows(self, rng):
        x = rng.normal(size=(6, 3))
        a = SegmentAssignment.from_ids([3, 0, 5, 1, 4, 2])
        np.testing.assert_array_equal(segment_means(x, a), x[[1, 3, 5, 0, 4, 2]])

    def test_one_segment_is_column_mean(self, rng):
        x = rng.normal(size=(7, 4))
        a = SegmentAssignment.from_ids(np.zeros(7, dtype=int))
        np.testing.assert_allclose(segment_means(x, a), x.mean(axis=0, keepdims=True), atol=1e-15)

    def test_groupby_oracle(self, rng):
        x = rng.normal(size=(10, 4))
        ids = np.array([2, 0, 1, 1, 2, 0, 0, 1, 2, 2])
        a = SegmentAssignment.from_ids(ids)
        np.testing.assert_allclose(segment_means(x, a), groupby_mean(x, ids), atol=1e-15)

    def test_stacked_heads(self, rng):
        x = rng.normal(size=(3, 10, 2))
        a = SegmentAssignment.from_ids(rng.integers(0, 4, size=10))
        out = segment_means(x, a)
        for h in range(3):
            np.testing.assert_allclose(out[h], segment_means(x[h], a), atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            segment_means(np.zeros((4, 2)), SegmentAssignment.from_ids([0, 1, 0]))

    def test_backward_is_adjoint(self, rng):
        x = rng.normal(size=(9, 3))
        a = SegmentAssignment.from_ids(rng.integers(0, 3, size=9))
        dm = rng.normal(size=(a.n_segments, 3))
        lhs = (segment_means(x, a) * dm).sum()
        rhs = (x * segment_means_backward(dm, a)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-13)

    def test_from_ids_compacts(self):
        a = SegmentAssignment.from_ids([5, 5, 9, 2])
        np.testing.assert_array_equal(a.ids, [1, 1, 2, 0])
        np.testing.assert_array_equal(a.counts, [1, 2, 1])


class TestContiguous:
    def test_uneven_split(self):
        a = contiguous_assignment(5, 2)
        np.testing.assert_array_equal(a.counts, [3, 2])
        np.testing.assert_array_equal(a.ids, [0, 0, 0, 1, 1])

    def test_capped_at_n(self):
        assert contiguous_assignment(3, 10).n_segments == 3
