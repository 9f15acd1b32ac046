"""Pure geometric primitives: sampling, grouping, distances, warping.

All operations are deterministic pure functions. Nearest-neighbor queries
use exact brute-force scans with a stable (distance, index) ordering so
ties always resolve to the lowest index; Chamfer distance switches to a
k-d tree for large clouds (the result is identical, only faster).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError, InvalidInputError

_KDTREE_CUTOFF = 2048  # brute force below this size


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points (meters) with optional per-point object labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("non-finite coordinate in point cloud")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise InvalidInputError(
                    f"labels length {lab.shape} != point count {pts.shape[0]}"
                )
            if lab.size and lab.min() < 0:
                raise InvalidInputError("labels must be non-negative")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Grouping:
    """Per-center member indices into a source cloud, capped at k."""

    centers: np.ndarray
    member_indices: list[np.ndarray]
    group_size_cap: int

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """(indices, valid_mask) padded to the largest group size.

        Padding repeats each group's first member so gathered coordinates
        stay in range; the mask marks real members.
        """
        k = max(len(g) for g in self.member_indices)
        n = len(self.member_indices)
        idx = np.zeros((n, k), dtype=np.int64)
        mask = np.zeros((n, k), dtype=bool)
        for i, g in enumerate(self.member_indices):
            idx[i, : len(g)] = g
            idx[i, len(g):] = g[0]
            mask[i, : len(g)] = True
        return idx, mask


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3) points, got {pts.shape}")
    return pts


def _sq_dists(centers: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = centers[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(cloud: PointCloud, m: int, seed: int) -> np.ndarray:
    """Iterative max-min down-sampling to `m` distinct indices.

    The first index is drawn uniformly from a generator seeded with `seed`;
    each later pick maximizes the minimum distance to the selected set,
    lowest index winning ties.
    """
    n = len(cloud)
    if m < 1 or m > n:
        raise InvalidArgumentError(f"m={m} out of range for cloud of {n} points")
    first = int(np.random.default_rng(seed).integers(n))
    return _fps_from(cloud.points, m, first)


def _fps_from(points: np.ndarray, m: int, first: int) -> np.ndarray:
    selected = np.empty(m, dtype=np.int64)
    selected[0] = first
    if m == 1:
        return selected
    d = np.sum((points - points[first]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d))  # first occurrence = lowest index on ties
        selected[i] = nxt
        d = np.minimum(d, np.sum((points - points[nxt]) ** 2, axis=1))
    return selected


def knn_group(centers, cloud: PointCloud, k: int) -> Grouping:
    """For each center, the min(k, |cloud|) nearest cloud points.

    Members are ordered by ascending distance, then ascending index.
    """
    centers = _as_points(centers)
    if len(cloud) < 1:
        raise InvalidArgumentError("knn_group: empty cloud")
    if k < 1:
        raise InvalidArgumentError("knn_group: k must be >= 1")
    kk = min(k, len(cloud))
    d = _sq_dists(centers, cloud.points)
    # stable sort keeps original (ascending index) order among equal distances
    order = np.argsort(d, axis=1, kind="stable")[:, :kk]
    members = [order[i].astype(np.int64) for i in range(centers.shape[0])]
    return Grouping(centers=centers, member_indices=members, group_size_cap=k)


def radius_group(centers, cloud: PointCloud, radius: float, cap: int) -> Grouping:
    """All points within `radius` of each center, truncated to the `cap`
    nearest; a center with no in-radius point keeps its single nearest
    neighbor so groups are never empty.
    """
    centers = _as_points(centers)
    if len(cloud) < 1:
        raise InvalidArgumentError("radius_group: empty cloud")
    if radius <= 0:
        raise InvalidArgumentError("radius_group: radius must be positive")
    if cap < 1:
        raise InvalidArgumentError("radius_group: cap must be >= 1")
    d = _sq_dists(centers, cloud.points)
    r2 = radius * radius
    order = np.argsort(d, axis=1, kind="stable")
    members = []
    for i in range(centers.shape[0]):
        row = order[i]
        inside = row[d[i, row] <= r2]
        if inside.size == 0:
            inside = row[:1]  # fallback: single nearest neighbor
        members.append(inside[:cap].astype(np.int64))
    return Grouping(centers=centers, member_indices=members, group_size_cap=cap)


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Symmetric sum of mean squared nearest-neighbor distances."""
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("chamfer_distance: empty cloud")
    pa, pb = a.points, b.points
    if len(a) * len(b) <= _KDTREE_CUTOFF * _KDTREE_CUTOFF // 4:
        d = _sq_dists(pa, pb)
        ab = d.min(axis=1).mean()
        ba = d.min(axis=0).mean()
    else:
        ab = (cKDTree(pb).query(pa, k=1)[0] ** 2).mean()
        ba = (cKDTree(pa).query(pb, k=1)[0] ** 2).mean()
    return float(ab + ba)


def warp(cloud: PointCloud, flow) -> PointCloud:
    """Translate each point by its flow vector; labels carry over."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != cloud.points.shape:
        raise InvalidArgumentError(
            f"flow shape {flow.shape} != cloud shape {cloud.points.shape}"
        )
    return PointCloud(points=cloud.points + flow, labels=cloud.labels)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic (x, then y, then z) ordering of the rows.

    Layers seed their internal FPS on this ordering so a permutation of the
    input cannot change which points get sampled.
    """
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
