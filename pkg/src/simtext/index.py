"""The similarity manifold as a queryable store.

An exact (linear scan) nearest-neighbor index over labeled feat-layer
vectors, plus the distance-threshold machinery for pair-similarity
classification. Neighbor votes are weighted 1/(1+d); the winning label's
vote share is the prediction confidence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

Array = np.ndarray


class ManifoldError(ValueError):
    """Raised for malformed index operations or files."""


@dataclass
class Prediction:
    """KNN outcome: winning label, its vote share, and the evidence."""

    label: str
    confidence: float
    neighbors: List[Tuple[str, float, str]]  # (id, distance, label) ascending


class ManifoldIndex:
    """Labeled feat vectors under Euclidean distance; ids are unique."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ManifoldError("feat dimension must be positive")
        self.dim = dim
        self._ids: List[str] = []
        self._labels: List[str] = []
        self._vectors: List[Array] = []
        self._id_set: set = set()

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    def entries(self) -> Iterable[Tuple[str, Array, str]]:
        return zip(self._ids, self._vectors, self._labels)

    def insert(self, id_: str, vector: Array, label: str) -> None:
        if id_ in self._id_set:
            raise ManifoldError(f"duplicate id {id_!r}")
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ManifoldError(f"vector shape {vector.shape} != ({self.dim},)")
        self._ids.append(id_)
        self._labels.append(label)
        self._vectors.append(vector.copy())
        self._id_set.add(id_)

    def _matrix(self) -> Array:
        return np.stack(self._vectors) if self._vectors else np.zeros((0, self.dim))

    def knn_predict(self, query: Array, k: int) -> Prediction:
        """k nearest entries by Euclidean distance, ties broken by id.

        The label is the argmax of summed vote weights 1/(1+d); its share of
        the total vote mass is the confidence. Label ties go to the label
        with the nearer nearest member.
        """
        if not self._ids:
            raise ManifoldError("index is empty")
        if not (1 <= k <= len(self._ids)):
            raise ManifoldError(f"k={k} outside [1, {len(self._ids)}]")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ManifoldError(f"query shape {query.shape} != ({self.dim},)")
        diffs = self._matrix() - query[None, :]
        dists = np.sqrt((diffs * diffs).sum(axis=1))
        order = sorted(range(len(self._ids)), key=lambda i: (dists[i], self._ids[i]))
        top = order[:k]
        neighbors = [(self._ids[i], float(dists[i]), self._labels[i]) for i in top]
        votes: dict = {}
        nearest: dict = {}
        for id_, d, label in neighbors:
            w = 1.0 / (1.0 + d)
            votes[label] = votes.get(label, 0.0) + w
            if label not in nearest:
                nearest[label] = d
        total = sum(votes.values())
        winner = min(votes, key=lambda lab: (-votes[lab], nearest[lab], lab))
        return Prediction(
            label=winner,
            confidence=votes[winner] / total,
            neighbors=neighbors,
        )


def build_index(embeddings: Sequence[Tuple[str, Array, str]]) -> ManifoldIndex:
    """Build from (id, feat vector, label) triples; rejects duplicates."""
    if not embeddings:
        raise ManifoldError("cannot build an empty index")
    first = np.asarray(embeddings[0][1])
    index = ManifoldIndex(dim=first.shape[0])
    for id_, vec, label in embeddings:
        index.insert(id_, vec, label)
    return index


# ---------------------------------------------------------------------------
# pair similarity
# ---------------------------------------------------------------------------

SIMILAR = "similar"
DISSIMILAR = "dissimilar"


def classify_pair(d: float, theta_sim: float) -> str:
    """similar iff d <= theta_sim (boundary inclusive)."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    return SIMILAR if d <= theta_sim else DISSIMILAR


def threshold_candidates(distances: Sequence[float]) -> List[float]:
    """One threshold below all distances, midpoints of distinct sorted
    distances, and one above all: every achievable decision boundary."""
    uniq = sorted(set(float(d) for d in distances))
    cands = [uniq[0] - 1.0]
    cands.extend((a + b) / 2.0 for a, b in zip(uniq, uniq[1:]))
    cands.append(uniq[-1] + 1.0)
    return cands


def select_similarity_threshold(
    scored: Sequence[Tuple[float, int]]
) -> Tuple[float, float, float]:
    """Pick the distance threshold minimizing 0.9*FN + 0.1*FP.

    `scored` holds (distance, y) with y=0 similar / y=1 dissimilar. FP is the
    rate of similar pairs predicted dissimilar; FN the rate of dissimilar
    pairs predicted similar. FN is weighted heavier because an accepted wrong
    match costs accuracy while a missed match only costs efficiency. Ties go
    to the smaller threshold. Returns (theta, fp_rate, fn_rate).
    """
    dists = np.array([d for d, _ in scored], dtype=np.float64)
    ys = np.array([y for _, y in scored], dtype=np.int64)
    n_sim = int((ys == 0).sum())
    n_dis = int((ys == 1).sum())
    if n_sim == 0 or n_dis == 0:
        raise ValueError("need both similar and dissimilar pairs")
    best = None
    for theta in threshold_candidates(dists):
        pred_sim = dists <= theta
        fp = float((~pred_sim & (ys == 0)).sum()) / n_sim
        fn = float((pred_sim & (ys == 1)).sum()) / n_dis
        objective = 0.9 * fn + 0.1 * fp
        if best is None or objective < best[0]:
            best = (objective, theta, fp, fn)
    return best[1], best[2], best[3]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MAGIC = b"MIDX"
VERSION = 1


def save_index(path, index: ManifoldIndex) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, index.dim, len(index)))
        for id_, vec, label in index.entries():
            id_b = id_.encode("utf-8")
            lab_b = label.encode("utf-8")
            f.write(struct.pack("<I", len(id_b)))
            f.write(id_b)
            f.write(struct.pack("<I", len(lab_b)))
            f.write(lab_b)
            f.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ManifoldError(f"truncated index file while reading {what}")
    return data


def load_index(path) -> ManifoldIndex:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise ManifoldError("bad magic bytes; not a manifold index")
        version, dim, count = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != VERSION:
            raise ManifoldError(f"unsupported index version {version}")
        index = ManifoldIndex(dim=dim)
        for _ in range(count):
            (id_len,) = struct.unpack("<I", _read_exact(f, 4, "id length"))
            id_ = _read_exact(f, id_len, "id").decode("utf-8")
            (lab_len,) = struct.unpack("<I", _read_exact(f, 4, "label length"))
            label = _read_exact(f, lab_len, "label").decode("utf-8")
            vec = np.frombuffer(_read_exact(f, 8 * dim, "vector"), dtype="<f8")
            index.insert(id_, vec, label)
        if f.read(1):
            raise ManifoldError("trailing bytes after last entry")
    return index


def _fmt(x: float) -> str:
    return repr(float(x))


def export_tsv(path, index: ManifoldIndex) -> None:
    """Flat TSV (id, label, feat values) for external visualization."""
    with open(path, "w", encoding="utf-8") as f:
        cols = "\t".join(f"feat_{i}" for i in range(index.dim))
        f.write(f"id\tlabel\t{cols}\n")
        for id_, vec, label in index.entries():
            values = "\t".join(_fmt(v) for v in vec)
            f.write(f"{id_}\t{label}\t{values}\n")
