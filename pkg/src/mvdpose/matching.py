"""Cross-view identity clustering of appearance features.

Detections from all views are clustered into ``K`` identities with
constrained K-means: every detection joins exactly one cluster and a
cluster holds at most one detection per view. The E-step decouples by
view, and each view is an exact rectangular assignment problem.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError
from .geometry import Skeleton2D, Skeleton3D

log = logging.getLogger(__name__)

UNASSIGNED = -1


@dataclass(eq=False)
class Detection:
    view: int
    index: int
    skeleton2d: Skeleton2D
    feature: np.ndarray
    bbox: np.ndarray = field(default_factory=lambda: np.zeros(4))
    skeleton3d_lifted: Skeleton3D | None = None
    score: float = 1.0

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(self.feature)):
            raise ParameterError(f"non-finite feature in detection ({self.view}, {self.index})")

    @property
    def key(self) -> tuple[int, int]:
        return (self.view, self.index)


@dataclass
class Assignment:
    """Cluster membership ``(view, index) -> k``; absent keys are unassigned."""

    labels: dict[tuple[int, int], int]
    K: int

    def members(self, k: int) -> list[tuple[int, int]]:
        return sorted(key for key, lab in self.labels.items() if lab == k)

    def clusters(self) -> dict[int, list[tuple[int, int]]]:
        return {k: self.members(k) for k in range(self.K)}

    def check(self, num_views: int | None = None) -> bool:
        """True iff the three membership constraints hold."""
        seen = set()
        counts = np.zeros(self.K, dtype=int)
        for (view, _), k in self.labels.items():
            if not 0 <= k < self.K:
                return False
            if (view, k) in seen:
                return False
            seen.add((view, k))
            counts[k] += 1
        if num_views is not None and np.any(counts > num_views):
            return False
        return True

    def to_dict(self) -> dict:
        return {"clusters": [{"id": k, "members": [list(m) for m in mem]} for k, mem in self.clusters().items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "Assignment":
        labels = {}
        for c in d["clusters"]:
            for view, index in c["members"]:
                labels[(int(view), int(index))] = int(c["id"])
        K = max((int(c["id"]) for c in d["clusters"]), default=-1) + 1
        return cls(labels, K)


@dataclass
class ClusterSet:
    centroids: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _canonical_assignment(cost: np.ndarray) -> np.ndarray:
    """Optimal row->column assignment, ties broken towards low column indices.

    Rows are fixed one at a time to the lowest column that still admits an
    optimal completion, which yields the lexicographically smallest
    optimum. Returns the column per row, ``UNASSIGNED`` for surplus rows.
    """
    n, k = cost.shape
    out = np.full(n, UNASSIGNED, dtype=int)
    if n == 0 or k == 0:
        return out
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    tol = 1e-12 * (1.0 + abs(best))
    if n > k:
        # rows left over by the optimum stay unassigned; canonicalise the rest
        chosen = np.sort(rows)
        out[chosen] = _canonical_assignment(cost[chosen])
        return out
    free_rows = list(range(n))
    free_cols = list(range(k))
    fixed = 0.0
    for r in range(n):
        free_rows.remove(r)
        for c in sorted(free_cols):
            rest_cols = [x for x in free_cols if x != c]
            sub = 0.0
            if free_rows:
                sub_cost = cost[np.ix_(free_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub_cost)
                sub = sub_cost[rr, cc].sum()
            if fixed + cost[r, c] + sub <= best + tol:
                out[r] = c
                fixed += cost[r, c]
                free_cols.remove(c)
                break
    return out


def assignment_step(features: np.ndarray, views: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """E-step: exact per-view assignment of detections to clusters.

    Args:
        features: (N, D) detection features.
        views: (N,) view index of each detection.
        centroids: (K, D) cluster centres.

    Returns:
        (N,) cluster label per detection, ``UNASSIGNED`` where a view has
        more detections than clusters.
    """
    features = np.asarray(features, dtype=np.float64)
    views = np.asarray(views)
    labels = np.full(len(features), UNASSIGNED, dtype=int)
    if len(features) == 0:
        return labels
    sq = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    for v in np.unique(views):
        idx = np.flatnonzero(views == v)
        labels[idx] = _canonical_assignment(sq[idx])
    return labels


def clustering_objective(features: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    m = labels >= 0
    if not np.any(m):
        return 0.0
    return float(((features[m] - centroids[labels[m]]) ** 2).sum())


def _farthest_point_init(features: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(features)))]
    dmin = ((features - features[chosen[0]]) ** 2).sum(1)
    while len(chosen) < K:
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((features - features[nxt]) ** 2).sum(1))
    return features[chosen].copy()


def _drop_surplus(detections: list[Detection], K: int) -> list[Detection]:
    by_view: dict[int, list[Detection]] = {}
    for det in detections:
        by_view.setdefault(det.view, []).append(det)
    kept = []
    for view in sorted(by_view):
        dets = by_view[view]
        if len(dets) > K:
            ranked = sorted(dets, key=lambda d: (-d.score, -int(d.skeleton2d.valid.sum()), d.index))
            dropped = ranked[K:]
            log.warning("view %d has %d detections for K=%d; rejecting %s", view, len(dets), K, [d.index for d in dropped])
            dets = ranked[:K]
        kept.extend(dets)
    return kept


def cluster_features(
    detections: list[Detection], K: int, max_iter: int = 100, seed: int = 0
) -> tuple[Assignment, ClusterSet]:
    """Constrained K-means over detection features.

    Alternates the exact per-view assignment with centroid means; an empty
    cluster keeps its previous centroid. Stops when the assignment repeats
    or after ``max_iter`` iterations.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if not detections:
        return Assignment({}, K), ClusterSet(np.zeros((K, 0)), 0.0)
    dims = {d.feature.shape[0] for d in detections}
    if len(dims) != 1:
        raise ParameterError(f"feature dimension differs across detections: {sorted(dims)}")
    dets = _drop_surplus(detections, K)
    feats = np.stack([d.feature for d in dets])
    views = np.array([d.view for d in dets])
    rng = np.random.default_rng(seed)
    centroids = _farthest_point_init(feats, K, rng)

    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new = assignment_step(feats, views, centroids)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            m = labels == k
            if np.any(m):
                centroids[k] = feats[m].mean(0)
        history.append(clustering_objective(feats, labels, centroids))
    assignment = Assignment({d.key: int(k) for d, k in zip(dets, labels) if k >= 0}, K)
    objective = clustering_objective(feats, labels, centroids)
    return assignment, ClusterSet(centroids, objective, history, it)


@dataclass
class PersonPair:
    """Two views' observations of one identity."""

    k: int
    view_i: int
    view_j: int
    skeletons2d: tuple[Skeleton2D, Skeleton2D]
    skeletons3d: tuple[Skeleton3D | None, Skeleton3D | None]


def correspondences_from_assignment(assignment: Assignment, detections: list[Detection]) -> list[PersonPair]:
    """Every view pair ``i < j`` sharing an identity, in (k, i, j) order."""
    lookup = {d.key: d for d in detections}
    pairs = []
    for k in range(assignment.K):
        members = [lookup[m] for m in assignment.members(k) if m in lookup]
        members = [d for d in members if d.skeleton2d.valid.any()]
        members.sort(key=lambda d: d.view)
        for a, b in itertools.combinations(members, 2):
            pairs.append(
                PersonPair(k, a.view, b.view, (a.skeleton2d, b.skeleton2d), (a.skeleton3d_lifted, b.skeleton3d_lifted))
            )
    return pairs
