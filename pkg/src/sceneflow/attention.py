"""Attention-based abstraction layers.

Three pieces live here:

* attention pooling -- synthesize one representative point per group as a
  softmax-weighted average of its members, the weights coming from dot
  products between point-level descriptors and the group-level descriptor;
* the spatial abstraction layer -- FPS grouping, attention pooling, then a
  re-grouping step where each synthesized point defines its own attended
  region before a shared PointNet extracts the output descriptor;
* the temporal correlation layer -- for every point of the first feature
  set, group points of the second set inside a search radius (optionally
  shifted by an initial flow estimate) and digest the group into a
  descriptor that fuses both frames.

Plus the parameter-free flow interpolation used to transfer a flow field
onto new query points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .autodiff import Tensor, concat, where_mask
from .errors import InvalidArgumentError, InvalidInputError, ShapeError
from .geometry import PointCloud, canonical_order, knn_group, radius_group
from .nn import ParameterStore, shared_mlp


@dataclass
class FeatureSet:
    """Representative points paired with fixed-width descriptors."""

    points: Tensor          # (M, 3)
    descriptors: Tensor     # (M, D)
    kind: str               # "spatial" | "temporal" | "pointwise"

    def __post_init__(self):
        if self.points.shape[0] != self.descriptors.shape[0]:
            raise ShapeError(
                f"{self.points.shape[0]} points vs {self.descriptors.shape[0]} descriptor rows"
            )
        if self.kind not in ("spatial", "temporal", "pointwise"):
            raise InvalidArgumentError(f"unknown feature kind {self.kind!r}")

    def __len__(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.descriptors.shape[1]


@dataclass
class ApOutput:
    """Result of attention pooling one group."""

    synthesized_point: Tensor  # (3,)
    weights: Tensor            # (k,)


def attention_pool(group_points, point_descs: Tensor, group_desc: Tensor) -> ApOutput:
    """Softmax-weighted average of a single group of points.

    ``w_i = softmax_i(f_i . f_g)``; the synthesized point is ``sum w_i s_i``
    and is differentiable through both the softmax and the weighted sum.
    """
    pts = np.asarray(group_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"group_points must be (k, 3), got {pts.shape}")
    if not isinstance(point_descs, Tensor):
        point_descs = Tensor(point_descs)
    if not isinstance(group_desc, Tensor):
        group_desc = Tensor(group_desc)
    if point_descs.shape[0] != pts.shape[0]:
        raise ShapeError("one descriptor row per group point required")
    if point_descs.shape[1] != group_desc.shape[0]:
        raise ShapeError(
            f"descriptor width {point_descs.shape[1]} != group descriptor width {group_desc.shape[0]}"
        )
    if not (np.all(np.isfinite(point_descs.data)) and np.all(np.isfinite(group_desc.data))):
        raise InvalidInputError("non-finite descriptor")
    logits = (point_descs * group_desc.reshape(1, -1)).sum(axis=1)
    weights = logits.softmax(axis=0)
    point = (weights.reshape(-1, 1) * Tensor(pts)).sum(axis=0)
    return ApOutput(synthesized_point=point, weights=weights)


def _attention_pool_batched(group_points: Tensor, point_descs: Tensor,
                            group_desc: Tensor) -> tuple[Tensor, Tensor]:
    """Vectorized attention pooling over fixed-size groups.

    group_points (M, K, 3), point_descs (M, K, D), group_desc (M, D);
    returns (synthesized points (M, 3), weights (M, K)).
    """
    m, k, d = point_descs.shape
    logits = (point_descs * group_desc.reshape(m, 1, d)).sum(axis=2)
    weights = logits.softmax(axis=1)
    points = (weights.reshape(m, k, 1) * group_points).sum(axis=1)
    return points, weights


def _group_pointnet(params: ParameterStore, prefix: str, rows: Tensor,
                    valid: np.ndarray | None = None) -> Tensor:
    """Shared PointNet over grouped rows (M, K, D) -> (M, D_out).

    Rows flagged invalid (padding) are excluded from the max pool.
    """
    feat = shared_mlp(params.chain(prefix), rows, final_relu=True)
    if valid is not None:
        feat = where_mask(valid[:, :, None], feat, -1e30)
    return feat.max(axis=1)


def spatial_abstraction(cloud: PointCloud, in_features: FeatureSet | None,
                        m: int, k: int, params: ParameterStore, seed: int,
                        prefix: str = "sa") -> FeatureSet:
    """Attention-stabilized down-sampling of one cloud to `m` spatial features.

    Pipeline: canonical reorder -> seeded FPS -> kNN grouping -> shared
    PointNet giving point descriptors f_i and group descriptor f_g ->
    attention pooling per group -> re-grouping around each synthesized
    point -> shared PointNet over center-subtracted local coordinates
    (concatenated with input descriptors when present).

    FPS runs on the lexicographically sorted cloud so a permutation of the
    input points produces the identical feature set.
    """
    points_t = cloud if isinstance(cloud, Tensor) else Tensor(cloud.points)
    in_descs = None
    if in_features is not None:
        if len(in_features) != points_t.shape[0]:
            raise ShapeError("in_features must align with the cloud")
        in_descs = in_features.descriptors
    return _spatial_abstraction_t(points_t, in_descs, m, k, params, seed, prefix)


def _spatial_abstraction_t(points_t: Tensor, in_descs: Tensor | None, m: int,
                           k: int, params: ParameterStore, seed: int,
                           prefix: str) -> FeatureSet:
    """Tensor-level core of :func:`spatial_abstraction`.

    Keeps the input positions differentiable so gradients reach earlier
    layers whose outputs feed this one as coordinates.
    """
    n = points_t.shape[0]
    if m < 1 or m > n:
        raise InvalidArgumentError(f"m={m} out of range for cloud of {n} points")
    order = canonical_order(points_t.data)
    pts_t = points_t.take(order)
    pts = pts_t.data
    if in_descs is not None:
        in_descs = in_descs.take(order)

    first = int(np.random.default_rng(seed).integers(n))
    centers_idx = geometry._fps_from(pts, m, first)
    canon = PointCloud(points=pts)
    grouping = knn_group(pts[centers_idx], canon, k)
    gidx = np.stack(grouping.member_indices)  # kNN groups share one size
    group_pts = pts_t.take(gidx)
    local = group_pts - pts_t.take(centers_idx).reshape(m, 1, 3)

    fi = shared_mlp(params.chain(f"{prefix}/ap"), local, final_relu=True)
    fg = fi.max(axis=1)
    new_points, _ = _attention_pool_batched(group_pts, fi, fg)

    # each synthesized point defines its own attended region
    regroup = knn_group(new_points.data, canon, k)
    ridx = np.stack(regroup.member_indices)
    local2 = pts_t.take(ridx) - new_points.reshape(m, 1, 3)
    rows = local2
    if in_descs is not None:
        rows = concat([local2, in_descs.take(ridx)], axis=2)
    descs = _group_pointnet(params, f"{prefix}/pn", rows)
    return FeatureSet(points=new_points, descriptors=descs, kind="spatial")


def temporal_correlation(feat1: FeatureSet, feat2: FeatureSet,
                         initial_flow: np.ndarray | None,
                         radius: float, cap: int,
                         params: ParameterStore, prefix: str = "ta") -> FeatureSet:
    """Cross-frame feature fusion with flow-shifted attended regions.

    For each point A of `feat1`, group `feat2` points within `radius` of A
    (or of A + its initial flow vector when one is given), then run a
    shared PointNet over [member - A, member descriptor, A's descriptor]
    and max-pool. The output sits at A's original position.
    """
    m = len(feat1)
    if initial_flow is not None:
        initial_flow = np.asarray(initial_flow, dtype=np.float64)
        if initial_flow.shape != (m, 3):
            raise InvalidArgumentError(
                f"initial_flow shape {initial_flow.shape} != ({m}, 3)"
            )
    centers = feat1.points.data + (initial_flow if initial_flow is not None else 0.0)
    grouping = radius_group(centers, PointCloud(points=feat2.points.data), radius, cap)
    gidx, valid = grouping.padded()
    k = gidx.shape[1]

    rel = feat2.points.take(gidx) - feat1.points.reshape(m, 1, 3)
    d2 = feat2.descriptors.take(gidx)
    d1 = feat1.descriptors.reshape(m, 1, feat1.width) * Tensor(np.ones((m, k, 1)))
    rows = concat([rel, d2, d1], axis=2)
    descs = _group_pointnet(params, prefix, rows, valid=valid)
    return FeatureSet(points=feat1.points, descriptors=descs, kind="temporal")


def flow_interpolate(source_points, source_flow, query_points, k: int = 3) -> np.ndarray:
    """Unweighted mean of the flow at each query's k nearest source points.

    Deterministic and parameter-free; no gradients flow through it.
    """
    src = np.asarray(source_points, dtype=np.float64)
    flow = np.asarray(source_flow, dtype=np.float64)
    qry = np.asarray(query_points, dtype=np.float64)
    if src.ndim != 2 or src.shape[0] == 0:
        raise InvalidArgumentError("flow_interpolate: empty source")
    if flow.shape != src.shape:
        raise InvalidArgumentError("source_flow must align with source_points")
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    grouping = knn_group(qry, PointCloud(points=src), k)
    gidx = np.stack(grouping.member_indices)
    return flow[gidx].mean(axis=1)
