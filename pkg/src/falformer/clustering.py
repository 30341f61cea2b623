"""K-means segmentation of patch tokens.

Segment ids are 0-based here (``0 .. n_segments-1``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClusteringError, ShapeError

MAX_ITERS = 50


@dataclass(frozen=True)
class SegmentAssignment:
    ids: np.ndarray         # (N,) int segment index per token
    counts: np.ndarray      # (k,) tokens per segment, all >= 1
    centroids: np.ndarray   # (k, d)
    wcss: float
    wcss_history: tuple = ()
    n_iter: int = 0

    @property
    def n_segments(self):
        return len(self.counts)

    @classmethod
    def from_ids(cls, ids, tokens=None):
        """Build an assignment from raw ids, compacting unused labels.

        Centroids and WCSS are filled in only when ``tokens`` is given.
        """
        ids = np.asarray(ids)
        if ids.ndim != 1 or len(ids) == 0:
            raise ShapeError("ids must be a non-empty 1-D array")
        _, compact = np.unique(ids, return_inverse=True)
        compact = compact.astype(np.intp)
        counts = np.bincount(compact)
        if tokens is None:
            centroids = np.zeros((len(counts), 0))
            wcss = float("nan")
        else:
            tokens = np.asarray(tokens, dtype=np.float64)
            centroids = _group_means(tokens, compact, counts)
            wcss = _wcss(tokens, compact, centroids)
        return cls(compact, counts, centroids, wcss)


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _group_means(x, ids, counts):
    sums = np.zeros((len(counts), x.shape[1]))
    np.add.at(sums, ids, x)
    return sums / counts[:, None]


def _wcss(x, ids, centroids):
    diff = x - centroids[ids]
    return float(np.sum(diff * diff))


def _kmeanspp(x, k, rng):
    n = len(x)
    first = int(rng.integers(n))
    centers = [first]
    d2 = ((x - x[first]) ** 2).sum(1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break  # every remaining point coincides with a chosen center
        nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        np.minimum(d2, ((x - x[nxt]) ** 2).sum(1), out=d2)
    return x[centers].copy()


def _lloyd(x, k, rng, max_iters):
    centroids = _kmeanspp(x, k, rng)
    ids = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_ids = _sq_dists(x, centroids).argmin(axis=1)
        history.append(_wcss(x, new_ids, centroids))
        if ids is not None and np.array_equal(new_ids, ids):
            break
        ids = new_ids
        counts = np.bincount(ids, minlength=len(centroids))
        keep = counts > 0
        if not keep.all():
            # drop empty clusters and renumber the survivors in order
            remap = np.cumsum(keep) - 1
            ids = remap[ids]
            counts = counts[keep]
        centroids = _group_means(x, ids, counts)
    ids = np.asarray(ids if ids is not None else new_ids, dtype=np.intp)
    counts = np.bincount(ids)
    keep = counts > 0
    if not keep.all():
        ids = (np.cumsum(keep) - 1)[ids]
        counts = counts[keep]
    centroids = _group_means(x, ids, counts)
    wcss = _wcss(x, ids, centroids)
    history.append(wcss)
    return SegmentAssignment(ids, counts, centroids, wcss, tuple(history), n_iter)


def kmeans(tokens, n_segments, seed=0, max_iters=MAX_ITERS, restarts=1):
    """Lloyd's algorithm with seeded k-means++ initialisation.

    The effective segment count is ``min(n_segments, N)``; clusters that end up
    empty are dropped, so every returned segment holds at least one token.
    With ``restarts > 1`` the run with the lowest WCSS is kept.

    When ``n_segments >= N`` the k-means++ seeding would pick every distinct
    token, and one Lloyd step makes each its own segment; that partition is
    returned directly (labels ordered by ``np.unique``).
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ClusteringError(f"kmeans needs a non-empty 2-D token matrix, got shape {x.shape}")
    if n_segments < 1:
        raise ClusteringError("n_segments must be >= 1")
    if max_iters < 1:
        raise ClusteringError("max_iters must be >= 1")
    k = min(int(n_segments), x.shape[0])
    if k == x.shape[0]:
        _, ids = np.unique(x, axis=0, return_inverse=True)
        ids = ids.reshape(-1).astype(np.intp)
        counts = np.bincount(ids)
        centroids = _group_means(x, ids, counts)
        return SegmentAssignment(ids, counts, centroids, 0.0, (0.0,), 1)
    seeds = np.random.SeedSequence(seed).spawn(restarts) if restarts > 1 else [seed]
    best = None
    for s in seeds:
        result = _lloyd(x, k, np.random.default_rng(s), max_iters)
        if best is None or result.wcss < best.wcss:
            best = result
    return best


def segment_means(tokens, assignment):
    """Per-segment mean rows; works on ``(N, d)`` or stacked ``(..., N, d)`` tokens."""
    x = np.asarray(tokens, dtype=np.float64)
    ids = assignment.ids
    if x.shape[-2] != len(ids):
        raise ShapeError(f"assignment covers {len(ids)} tokens, matrix has {x.shape[-2]} rows")
    order = np.argsort(ids, kind="stable")
    starts = np.concatenate(([0], np.cumsum(assignment.counts)[:-1]))
    sums = np.add.reduceat(x[..., order, :], starts, axis=-2)
    return sums / assignment.counts[:, None]


def segment_means_backward(dmeans, assignment):
    """Scatter the gradient of segment means back onto the tokens."""
    return (dmeans / assignment.counts[:, None])[..., assignment.ids, :]


def contiguous_assignment(n_tokens, n_segments):
    """Split ``range(n_tokens)`` into ordered runs; leading runs take the remainder."""
    n_segments = min(int(n_segments), n_tokens)
    if n_segments < 1:
        raise ValueError("need at least one segment")
    base, extra = divmod(n_tokens, n_segments)
    counts = np.full(n_segments, base, dtype=np.intp)
    counts[:extra] += 1
    ids = np.repeat(np.arange(n_segments), counts)
    return SegmentAssignment(ids, counts, np.zeros((n_segments, 0)), float("nan"))
