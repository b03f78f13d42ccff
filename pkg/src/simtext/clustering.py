"""Clustering of embedding vectors and chance-corrected agreement scoring.

Three clusterers (k-means, average-linkage agglomerative, DBSCAN) over any
embedding head, all deterministic given their inputs and seed, plus the
Adjusted Rand Index against ground-truth label partitions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

Array = np.ndarray

NOISE_ID = -1


class ClusteringError(ValueError):
    """Raised for invalid clustering parameters or mismatched partitions."""


@dataclass
class Partition:
    """Item id -> dense integer cluster id (NOISE_ID marks DBSCAN noise)."""

    assignment: Dict[str, int]

    def __post_init__(self):
        ids = sorted(c for c in set(self.assignment.values()) if c != NOISE_ID)
        if ids != list(range(len(ids))):
            raise ClusteringError(f"cluster ids not dense: {ids}")

    def n_clusters(self) -> int:
        return len(set(self.assignment.values()) - {NOISE_ID})


def from_labels(ids: Sequence[str], labels: Sequence[str]) -> Partition:
    """Ground-truth partition: one cluster per distinct label."""
    order: Dict[str, int] = {}
    for lab in labels:
        if lab not in order:
            order[lab] = len(order)
    return Partition({i: order[lab] for i, lab in zip(ids, labels)})


def _pairwise(vectors: Array) -> Array:
    sq = (vectors * vectors).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def kmeans(ids: Sequence[str], vectors: Array, k: int, seed: int = 0,
           max_iter: int = 100) -> Partition:
    """Lloyd iterations from k-means++ seeding; empty clusters are refilled
    with the point farthest from its current centroid."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if len(ids) != n:
        raise ClusteringError("ids and vectors disagree in length")
    if not (1 <= k <= n):
        raise ClusteringError(f"k={k} outside [1, {n}]")
    if max_iter < 1:
        raise ClusteringError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, vectors.shape[1]))
    centers[0] = vectors[int(rng.integers(n))]
    d2 = ((vectors - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = vectors[int(rng.integers(n))]
        else:
            centers[j] = vectors[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((vectors - centers[j]) ** 2).sum(axis=1))

    assign = None
    for _iteration in range(max_iter):
        dists = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for cid in range(k):
            if not (new_assign == cid).any():
                per_point = dists[np.arange(n), new_assign]
                far = int(per_point.argmax())
                new_assign[far] = cid
                dists[far] = np.inf
                dists[far, cid] = 0.0
        if assign is not None and (new_assign == assign).all():
            break
        assign = new_assign
        for cid in range(k):
            centers[cid] = vectors[assign == cid].mean(axis=0)
    return Partition({i: int(c) for i, c in zip(ids, assign)})


def kmeans_inertia(vectors: Array, partition: Partition,
                   ids: Sequence[str]) -> float:
    vectors = np.asarray(vectors, dtype=np.float64)
    assign = np.array([partition.assignment[i] for i in ids])
    total = 0.0
    for cid in set(assign):
        member = vectors[assign == cid]
        center = member.mean(axis=0)
        total += ((member - center) ** 2).sum()
    return float(total)


# ---------------------------------------------------------------------------
# agglomerative
# ---------------------------------------------------------------------------

def agglomerative(ids: Sequence[str], vectors: Array, *,
                  linkage: str = "average", k: Optional[int] = None,
                  distance: Optional[float] = None) -> Partition:
    """Bottom-up average-linkage merging.

    Stops at k clusters, or once the next merge's average distance would
    exceed the threshold. Equal-distance merge candidates are broken toward
    the smallest (min member index) pair, so results are deterministic.
    """
    if linkage != "average":
        raise ClusteringError(f"unsupported linkage {linkage!r}")
    if (k is None) == (distance is None):
        raise ClusteringError("specify exactly one of k or distance")
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if len(ids) != n:
        raise ClusteringError("ids and vectors disagree in length")
    if k is not None and not (1 <= k <= n):
        raise ClusteringError(f"k={k} outside [1, {n}]")
    if distance is not None and distance < 0:
        raise ClusteringError("distance threshold must be non-negative")

    dist = _pairwise(vectors)
    members: Dict[int, List[int]] = {i: [i] for i in range(n)}
    active = list(range(n))  # cluster key == smallest member index

    while len(active) > (k or 1):
        sub = dist[np.ix_(active, active)]
        rows, cols = np.triu_indices(len(active), k=1)
        vals = sub[rows, cols]
        # argmin takes the first minimum in row-major upper-triangle order,
        # which is exactly the smallest (i, j) candidate pair
        pos = int(vals.argmin())
        d = float(vals[pos])
        i, j = active[int(rows[pos])], active[int(cols[pos])]
        if distance is not None and d > distance:
            break
        ni, nj = len(members[i]), len(members[j])
        # Lance-Williams update keeps dist[x, y] the exact average pairwise
        # distance between clusters keyed x and y
        for x in active:
            if x in (i, j):
                continue
            dist[i, x] = dist[x, i] = (ni * dist[i, x] + nj * dist[j, x]) / (ni + nj)
        members[i].extend(members[j])
        del members[j]
        active.remove(j)

    order = sorted(active)
    out: Dict[str, int] = {}
    for cid, key in enumerate(order):
        for m in members[key]:
            out[ids[m]] = cid
    return Partition(out)


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

def default_dbscan_eps(vectors: Array, k: int = 4) -> float:
    """Median distance to the k-th nearest neighbor."""
    vectors = np.asarray(vectors, dtype=np.float64)
    dist = _pairwise(vectors)
    n = dist.shape[0]
    kth = np.sort(dist, axis=1)[:, min(k, n - 1)]
    return float(np.median(kth))


def dbscan(ids: Sequence[str], vectors: Array, eps: Optional[float] = None,
           min_pts: int = 4) -> Partition:
    """Core/border/noise semantics; noise carries the dedicated id."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if len(ids) != n:
        raise ClusteringError("ids and vectors disagree in length")
    if min_pts < 1:
        raise ClusteringError("min_pts must be >= 1")
    if eps is None:
        eps = default_dbscan_eps(vectors)
    if eps <= 0:
        raise ClusteringError("eps must be positive")

    dist = _pairwise(vectors)
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    assign = np.full(n, NOISE_ID, dtype=int)
    cid = 0
    for i in range(n):
        if assign[i] != NOISE_ID or not core[i]:
            continue
        queue = [i]
        assign[i] = cid
        while queue:
            p = queue.pop(0)
            if not core[p]:
                continue
            for q in neighbors[p]:
                if assign[q] == NOISE_ID:
                    assign[q] = cid
                    queue.append(int(q))
        cid += 1
    return Partition({i_: int(c) for i_, c in zip(ids, assign)})


# ---------------------------------------------------------------------------
# adjusted rand index
# ---------------------------------------------------------------------------

def _comb2(x: int) -> int:
    return x * (x - 1) // 2


def adjusted_rand_index(p: Partition, q: Partition) -> float:
    """Chance-corrected pair-counting agreement over the contingency table.

    1.0 when both partitions are trivially identical (degenerate
    denominator), exact integer arithmetic until the final division.
    """
    if set(p.assignment) != set(q.assignment):
        raise ClusteringError("partitions cover different item sets")
    items = sorted(p.assignment)
    n = len(items)
    table: Dict[Tuple[int, int], int] = {}
    a_sizes: Dict[int, int] = {}
    b_sizes: Dict[int, int] = {}
    for item in items:
        i, j = p.assignment[item], q.assignment[item]
        table[(i, j)] = table.get((i, j), 0) + 1
        a_sizes[i] = a_sizes.get(i, 0) + 1
        b_sizes[j] = b_sizes.get(j, 0) + 1
    sum_ij = sum(_comb2(v) for v in table.values())
    sum_a = sum(_comb2(v) for v in a_sizes.values())
    sum_b = sum(_comb2(v) for v in b_sizes.values())
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0
    return (sum_ij - expected) / (maximum - expected)
