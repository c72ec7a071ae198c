"""Changed-region detection by inverted place recognition.

Ordinary place recognition looks for the stored descriptor *closest* to a
query. Here every descriptor of the later session is matched to its nearest
neighbour among the earlier session's descriptors, and the poses whose
nearest-neighbour distance is *largest* are the places that changed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Trajectory
from .descriptor import DescriptorSet
from .errors import EmptyDescriptorSet

log = logging.getLogger(__name__)

LINEAR_SCAN_THRESHOLD = 512


@dataclass(frozen=True)
class ChangeScore:
    j: int
    nn_i: int
    distance: float


@dataclass(frozen=True)
class RegionPair:
    """Sphere centers for one changed region, in the common frame.

    ``center_t1`` is pose ``score.j`` of the later trajectory; ``center_t`` is
    the spatially nearest pose (index ``k_t``) of the earlier trajectory.
    """

    center_t: np.ndarray
    center_t1: np.ndarray
    score: ChangeScore
    radius: float
    k_t: int = 0
    rank: int = 0


def _nearest_in_block(vectors, keys, Q, chunk_bytes: int = 1 << 20):
    """Smallest squared distance from each row of ``Q`` to ``vectors``, and its lowest key.

    Distances are reduced per row exactly as in a single-query scan, so the
    batched and one-at-a-time paths agree bit for bit.
    """
    step = max(1, chunk_bytes // max(1, 8 * vectors.size))
    d2_out = np.empty(len(Q))
    k_out = np.empty(len(Q), dtype=np.int64)
    big = np.iinfo(np.int64).max
    for a in range(0, len(Q), step):
        d2 = ((vectors[None, :, :] - Q[a:a + step, None, :]) ** 2).sum(axis=2)
        m = d2.min(axis=1)
        d2_out[a:a + step] = m
        k_out[a:a + step] = np.where(d2 == m[:, None], keys[None, :], big).min(axis=1)
    return d2_out, k_out


class LinearScanIndex:
    """Exact nearest neighbour by scanning every stored vector."""

    def __init__(self, keys: np.ndarray, vectors: np.ndarray):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)

    def __len__(self):
        return len(self.keys)

    def query(self, q: np.ndarray) -> tuple[int, float]:
        d2 = ((self.vectors - q) ** 2).sum(axis=1)
        best = d2.min()
        k = int(self.keys[d2 == best].min())
        return k, math.sqrt(best)

    def query_many(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d2, k = _nearest_in_block(self.vectors, self.keys, np.asarray(Q, dtype=np.float64))
        return k, np.sqrt(d2)


class KDTreeIndex:
    """Exact k-d tree over high-dimensional vectors.

    Splits on the dimension of largest spread at the median. Ties in distance
    resolve to the smallest key, matching :class:`LinearScanIndex`.
    """

    def __init__(self, keys: np.ndarray, vectors: np.ndarray, leaf_size: int = 16):
        self.keys = np.asarray(keys, dtype=np.int64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        self.leaf_size = max(1, int(leaf_size))
        # node arrays; leaves have dim == -1 and own rows[lo:hi] of `self.rows`
        self.dim: list[int] = []
        self.split: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.lo: list[int] = []
        self.hi: list[int] = []
        self.rows = np.arange(len(self.keys))
        self._build(0, len(self.keys))

    def __len__(self):
        return len(self.keys)

    def _new(self, dim, split, lo, hi) -> int:
        self.dim.append(dim)
        self.split.append(split)
        self.left.append(-1)
        self.right.append(-1)
        self.lo.append(lo)
        self.hi.append(hi)
        return len(self.dim) - 1

    def _build(self, lo: int, hi: int) -> int:
        rows = self.rows[lo:hi]
        pts = self.vectors[rows]
        spread = pts.max(axis=0) - pts.min(axis=0) if hi > lo else np.zeros(1)
        if hi - lo <= self.leaf_size or spread.max() == 0.0:
            return self._new(-1, 0.0, lo, hi)
        dim = int(np.argmax(spread))
        order = np.argsort(pts[:, dim], kind="stable")
        self.rows[lo:hi] = rows[order]
        mid = lo + (hi - lo) // 2
        node = self._new(dim, float(self.vectors[self.rows[mid], dim]), lo, hi)
        left = self._build(lo, mid)
        right = self._build(mid, hi)
        self.left[node] = left
        self.right[node] = right
        return node

    def _leaf_boxes(self):
        leaves = [n for n, d in enumerate(self.dim) if d < 0 and self.hi[n] > self.lo[n]]
        self._leaves = np.array(leaves, dtype=np.int64)
        self._box_lo = np.array([self.vectors[self.rows[self.lo[n]:self.hi[n]]].min(axis=0) for n in leaves])
        self._box_hi = np.array([self.vectors[self.rows[self.lo[n]:self.hi[n]]].max(axis=0) for n in leaves])

    def query(self, q: np.ndarray) -> tuple[int, float]:
        """Visit leaves in order of their bounding-box distance until none can be closer.

        Box bounds and point distances are reduced the same way per row, so a
        bound never exceeds the distance of a point inside its box; the small
        slack only guards against that assumption.
        """
        q = np.asarray(q, dtype=np.float64)
        if not hasattr(self, "_leaves"):
            self._leaf_boxes()
        gap = np.maximum(np.maximum(self._box_lo - q, q - self._box_hi), 0.0)
        bound = (gap ** 2).sum(axis=1)
        best_d2, best_k = math.inf, -1
        for n in np.argsort(bound, kind="stable").tolist():
            if bound[n] > best_d2 * (1.0 + 1e-12):
                break
            leaf = self._leaves[n]
            rows = self.rows[self.lo[leaf]:self.hi[leaf]]
            d2 = ((self.vectors[rows] - q) ** 2).sum(axis=1)
            m = d2.min()
            if m <= best_d2:
                k = int(self.keys[rows[d2 == m]].min())
                if m < best_d2 or k < best_k:
                    best_d2, best_k = m, k
        return best_k, math.sqrt(best_d2)

    def query_many(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched :meth:`query`: each leaf is scanned once for every query it may serve."""
        Q = np.asarray(Q, dtype=np.float64)
        if not hasattr(self, "_leaves"):
            self._leaf_boxes()
        bound = np.empty((len(Q), len(self._leaves)))
        for n in range(len(self._leaves)):
            gap = np.maximum(np.maximum(self._box_lo[n] - Q, Q - self._box_hi[n]), 0.0)
            bound[:, n] = (gap ** 2).sum(axis=1)
        best_d2 = np.full(len(Q), math.inf)
        best_k = np.full(len(Q), -1, dtype=np.int64)
        first = np.argmin(bound, axis=1)

        def scan(n, sel):
            if not sel.any():
                return
            leaf = self._leaves[n]
            rows = self.rows[self.lo[leaf]:self.hi[leaf]]
            d2, k = _nearest_in_block(self.vectors[rows], self.keys[rows], Q[sel])
            cur_d2, cur_k = best_d2[sel], best_k[sel]
            better = (d2 < cur_d2) | ((d2 == cur_d2) & (k < cur_k))
            best_d2[sel] = np.where(better, d2, cur_d2)
            best_k[sel] = np.where(better, k, cur_k)

        # the most promising leaf first gives tight bounds for the second pass
        for n in range(len(self._leaves)):
            scan(n, first == n)
        for n in range(len(self._leaves)):
            scan(n, (first != n) & (bound[:, n] <= best_d2 * (1.0 + 1e-12)))
        return best_k, np.sqrt(best_d2)


def build_index(Q_t: DescriptorSet, linear_threshold: int = LINEAR_SCAN_THRESHOLD,
                leaf_size: int = 16):
    """Nearest-neighbour index over the present records of ``Q_t``."""
    keys, vectors = Q_t.present_records()
    if len(keys) == 0:
        raise EmptyDescriptorSet("descriptor set has no present records")
    if len(keys) < linear_threshold:
        return LinearScanIndex(keys, vectors)
    return KDTreeIndex(keys, vectors, leaf_size=leaf_size)


def score_changes(index, Q_t1: DescriptorSet) -> list[ChangeScore]:
    """Nearest-neighbour distance of each present record of ``Q_t1``, ordered by j."""
    keys, vectors = Q_t1.present_records()
    order = np.argsort(keys, kind="stable")
    if len(keys) == 0:
        return []
    nn, dist = index.query_many(vectors[order])
    return [ChangeScore(j, int(i), float(d)) for j, i, d in zip(keys[order].tolist(), nn.tolist(), dist)]


def region_difference(q_a: np.ndarray, q_b: np.ndarray) -> float:
    """Difference between two regions, measured between their descriptors."""
    d = np.asarray(q_a, dtype=np.float64) - np.asarray(q_b, dtype=np.float64)
    return math.sqrt(float(np.dot(d, d)))


@dataclass(frozen=True)
class SelectOptions:
    """How many regions to keep and how far apart they must be.

    ``mode`` is ``"top_k"`` (keep ``k`` regions) or ``"threshold"`` (keep
    regions scoring at least mean + ``lambda_d`` * std of all scores).
    ``nms_radius`` and ``pairing_max`` default to twice ``radius``. Scores
    not above ``min_distance`` never become regions: a distance of zero
    means the pose's place was seen unchanged in the earlier session.
    """

    mode: str = "threshold"
    k: int = 3
    lambda_d: float = 2.0
    radius: float = 4.5
    nms_radius: float | None = None
    pairing_max: float | None = None
    min_distance: float = 0.0

    def __post_init__(self):
        if self.mode not in ("top_k", "threshold"):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.mode == "top_k" and self.k < 1:
            raise ValueError("top_k needs k >= 1")

    @property
    def nms(self) -> float:
        return 2.0 * self.radius if self.nms_radius is None else float(self.nms_radius)

    @property
    def pairing(self) -> float:
        return 2.0 * self.radius if self.pairing_max is None else float(self.pairing_max)


def rank_scores(scores: Sequence[ChangeScore]) -> list[ChangeScore]:
    return sorted(scores, key=lambda s: (-s.distance, s.j))


def select_regions(scores: Sequence[ChangeScore], Tr_t: Trajectory, Tr_t1: Trajectory,
                   opts: SelectOptions = SelectOptions()) -> list[RegionPair]:
    """Greedy non-maximum suppression over the ranked change scores."""
    if not scores:
        raise ValueError("no change scores to select from")
    dist = np.array([s.distance for s in scores])
    cutoff = -math.inf
    if opts.mode == "threshold":
        sigma = float(dist.std())
        if sigma == 0.0:
            return []
        cutoff = float(dist.mean()) + opts.lambda_d * sigma

    accepted: list[np.ndarray] = []
    out: list[RegionPair] = []
    nms2 = opts.nms * opts.nms
    for s in rank_scores(scores):
        if s.distance < cutoff or s.distance <= opts.min_distance:
            break
        p = Tr_t1.pose(s.j)
        if any(float(np.dot(p - a, p - a)) < nms2 for a in accepted):
            continue
        d2 = ((Tr_t.xyz - p) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        if math.sqrt(d2[i]) > opts.pairing:
            log.warning("pose %d has no earlier pose within %.2f m; skipped", s.j, opts.pairing)
            continue
        accepted.append(p)
        out.append(RegionPair(center_t=Tr_t.xyz[i], center_t1=p, score=s,
                              radius=opts.radius, k_t=i + 1, rank=len(out) + 1))
        if opts.mode == "top_k" and len(out) == opts.k:
            break
    return out
