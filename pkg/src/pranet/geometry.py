"""Spatial primitives over raw coordinates.

All neighbour searches are brute force and break distance ties by ascending
point index, so results are reproducible bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, DomainError, NumericError

EXACT_MATCH_SQ = 1e-20


@dataclass
class PointCloud:
    coords: np.ndarray
    labels: np.ndarray | None = None
    category: int | None = None
    keypoints: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise DimensionError(f"point cloud needs an (N, 3) array with N >= 1, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise NumericError("point cloud coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.coords),):
                raise DimensionError("per-point labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class NeighborIndex:
    idx: np.ndarray

    @property
    def k(self) -> int:
        return self.idx.shape[1]

    def __len__(self) -> int:
        return self.idx.shape[0]


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Squared Euclidean distances by explicit differences (exact for 3-D coordinates)."""
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("coordinates must be finite")
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # accumulate coordinate by coordinate; avoids an (n, m, D) temporary
    d = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        diff = np.subtract.outer(a[:, c], b[:, c])
        diff *= diff
        d += diff
    return d


def gram_sq_dist(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Squared distances via the Gram identity; cheaper for wide feature vectors."""
    b = a if b is None else b
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` smallest entries per row, ordered by (value, index)."""
    rows, n = d.shape
    if k >= n:
        return np.argsort(d, axis=1, kind="stable")
    if k <= 4:
        # repeated argmin picks the lowest index among equal values
        d = d.copy()
        out = np.empty((rows, k), dtype=np.intp)
        r = np.arange(rows)
        for j in range(k):
            out[:, j] = np.argmin(d, axis=1)
            d[r, out[:, j]] = np.inf
        return out
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, part, axis=1)
    thresh = vals.max(axis=1)
    # a tie straddling the partition boundary makes the selected set ambiguous
    at_thresh_all = (d == thresh[:, None]).sum(axis=1)
    at_thresh_sel = (vals == thresh[:, None]).sum(axis=1)
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    bad = np.nonzero(at_thresh_all != at_thresh_sel)[0]
    if bad.size:
        out[bad] = np.argsort(d[bad], axis=1, kind="stable")[:, :k]
    return out


def knn(coords: np.ndarray, k: int, query_idx: np.ndarray | None = None, metric: str = "exact") -> NeighborIndex:
    """k nearest neighbours of every point (or of ``query_idx``), self first.

    ``metric="gram"`` uses the Gram identity, meant for feature-space graphs.
    """
    coords = np.asarray(coords)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}], got {k}")
    q = np.arange(n) if query_idx is None else np.asarray(query_idx, dtype=np.intp)
    dist_fn = gram_sq_dist if metric == "gram" else pairwise_sq_dist
    d = dist_fn(coords[q], coords)
    d[np.arange(len(q)), q] = -np.inf
    return NeighborIndex(smallest_k(d, k))


def fps(coords: np.ndarray, S: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= S <= n:
        raise DomainError(f"S must lie in [1, {n}], got {S}")
    if not 0 <= seed_index < n:
        raise DomainError(f"seed index {seed_index} out of range")
    chosen = np.empty(S, dtype=np.intp)
    chosen[0] = seed_index
    diff = coords - coords[seed_index]
    mind = (diff * diff).sum(axis=1)
    for t in range(1, S):
        nxt = int(np.argmax(mind))
        chosen[t] = nxt
        diff = coords - coords[nxt]
        mind = np.minimum(mind, (diff * diff).sum(axis=1))
    return chosen


def idw_weights(query, anchors) -> np.ndarray:
    """Inverse squared-distance weights of one query against three anchors."""
    query = np.asarray(query, dtype=np.float64).reshape(1, 3)
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.shape != (3, 3):
        raise DimensionError(f"expected 3 anchors of dimension 3, got {anchors.shape}")
    return idw_weights_from_sq(pairwise_sq_dist(query, anchors))[0]


def idw_weights_from_sq(d2: np.ndarray) -> np.ndarray:
    """Row-wise weights from squared distances; rows with an exact match become one-hot.

    The one-hot goes to the closest matching column (first one on ties).
    """
    d2 = np.asarray(d2, dtype=np.float64)
    exact = d2 < EXACT_MATCH_SQ
    safe = np.where(exact, 1.0, d2)
    lam = 1.0 / safe
    w = lam / lam.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if hit.any():
        masked = np.where(exact, d2, np.inf)
        j = np.argmin(masked[hit], axis=1)
        onehot = np.zeros((int(hit.sum()), d2.shape[1]))
        onehot[np.arange(len(j)), j] = 1.0
        w[hit] = onehot
    return w


def load_xyzl(path: str | os.PathLike) -> PointCloud:
    """Read ``x y z [label]`` lines; ``#`` starts a comment."""
    rows: list[list[float]] = []
    labels: list[int] = []
    category = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("# category"):
                category = int(line.split()[2])
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            xyz = [float(v) for v in parts[:3]]
            if not all(np.isfinite(xyz)):
                raise NumericError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(xyz)
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if not rows:
        raise ValueError(f"{path}: no points")
    if labels and len(labels) != len(rows):
        raise ValueError(f"{path}: labels present on some lines only")
    return PointCloud(np.array(rows), np.array(labels) if labels else None, category)


def save_xyzl(path: str | os.PathLike, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        if cloud.category is not None:
            fh.write(f"# category {cloud.category}\n")
        for i, (x, y, z) in enumerate(cloud.coords):
            if cloud.labels is not None:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(cloud.labels[i])}\n")
            else:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
