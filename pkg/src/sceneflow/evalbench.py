"""Flow metrics, the down-sampling stability benchmark, magnitude-binned
error analysis, and report/CSV serialization.

Every report embeds the resolved configuration and seeds so its numbers
can be regenerated from the report alone. Chamfer values follow the
squared-distance convention (stated in the report schema).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import geometry
from .errors import InvalidArgumentError
from .geometry import PointCloud, canonical_order, chamfer_distance, knn_group
from .nn import ParameterStore
from .synthdata import SceneSpec, generate_scene

RELATIVE_ERROR_GUARD = 1e-9  # denominator guard for zero-magnitude ground truth


@dataclass
class FlowMetrics:
    """End-point error plus threshold accuracies, with masked variants."""

    epe: float
    acc_strict: float          # percent
    acc_relax: float           # percent
    masked_epe: float | None
    masked_acc_strict: float | None
    masked_acc_relax: float | None
    point_count: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _metric_triple(err: np.ndarray, rel: np.ndarray):
    epe = float(err.mean())
    strict = float(((err < 0.05) | (rel < 0.05)).mean() * 100.0)
    relax = float(((err < 0.1) | (rel < 0.1)).mean() * 100.0)
    return epe, strict, relax


def flow_metrics(pred_flow, gt_flow, gt_mask=None) -> FlowMetrics:
    """EPE (mean Euclidean error), strict accuracy (EPE < 0.05 m or
    relative error < 5%) and relaxed accuracy (0.1 m / 10%), each also
    restricted to mask-true points when a mask is given."""
    pred = np.asarray(getattr(pred_flow, "flow", pred_flow), dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidArgumentError(f"flow shapes {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=1)
    rel = err / (np.linalg.norm(gt, axis=1) + RELATIVE_ERROR_GUARD)
    epe, strict, relax = _metric_triple(err, rel)
    m_epe = m_strict = m_relax = None
    if gt_mask is not None:
        mask = np.asarray(gt_mask, dtype=bool)
        if mask.shape != (pred.shape[0],):
            raise InvalidArgumentError("mask length mismatch")
        if mask.any():
            m_epe, m_strict, m_relax = _metric_triple(err[mask], rel[mask])
    return FlowMetrics(
        epe=epe, acc_strict=strict, acc_relax=relax,
        masked_epe=m_epe, masked_acc_strict=m_strict, masked_acc_relax=m_relax,
        point_count=int(pred.shape[0]),
    )


@dataclass
class BinStat:
    lower: float
    upper: float
    mean_relative_error: float | None
    count: int


def magnitude_binned_error(pred_flow, gt_flow, bin_edges) -> list[BinStat]:
    """Mean relative error per ground-truth-magnitude bin.

    Bins are consecutive [edge_i, edge_{i+1}) intervals (the last is
    closed); points outside all bins are ignored; empty bins report None.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise InvalidArgumentError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise InvalidArgumentError("bin edges must be strictly increasing")
    pred = np.asarray(getattr(pred_flow, "flow", pred_flow), dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidArgumentError("flow shape mismatch")
    mag = np.linalg.norm(gt, axis=1)
    err = np.linalg.norm(pred - gt, axis=1)
    rel = err / (mag + RELATIVE_ERROR_GUARD)
    stats = []
    for i in range(edges.size - 1):
        lo, hi = edges[i], edges[i + 1]
        if i == edges.size - 2:
            sel = (mag >= lo) & (mag <= hi)
        else:
            sel = (mag >= lo) & (mag < hi)
        n = int(sel.sum())
        stats.append(BinStat(
            lower=float(lo), upper=float(hi),
            mean_relative_error=float(rel[sel].mean()) if n else None,
            count=n,
        ))
    return stats


# ---------------------------------------------------------------------------
# stability benchmark


def _mlp_forward_np(layers, x: np.ndarray) -> np.ndarray:
    for w, b in layers:
        x = x @ w + b
        x = np.maximum(x, 0.0)
    return x


def _ap_layers(params: ParameterStore, prefix: str):
    return [(e.weight.data, e.bias.data) for e in params.chain(prefix)]


def downsample_fps(points: np.ndarray, m: int, seed: int) -> np.ndarray:
    cloud = PointCloud(points=points)
    idx = geometry.farthest_point_sample(cloud, m, seed)
    return points[idx]


def downsample_attention(points: np.ndarray, m: int, k: int, ap_layers,
                         seed: int) -> np.ndarray:
    """Inference-only attention down-sampling (no autodiff graph).

    Mirrors the spatial layer's front half: canonical-order seeded FPS,
    kNN grouping, descriptor MLP, softmax attention, weighted average.
    """
    order = canonical_order(points)
    pts = points[order]
    n = pts.shape[0]
    first = int(np.random.default_rng(seed).integers(n))
    centers_idx = geometry._fps_from(pts, m, first)
    grouping = knn_group(pts[centers_idx], PointCloud(points=pts), k)
    gidx = np.stack(grouping.member_indices)
    local = pts[gidx] - pts[centers_idx][:, None, :]
    fi = _mlp_forward_np(ap_layers, local)
    fg = fi.max(axis=1)
    logits = np.einsum("mkd,md->mk", fi, fg)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkj->mj", w, pts[gidx])


@dataclass
class StabilityReport:
    """Average pairwise Chamfer distance per sample count, per method."""

    n_grid: list
    methods: dict               # name -> list of average CD (None if undefined)
    resamples: int
    scene_count: int
    down_to: int
    seed: int
    chamfer_convention: str = "squared"
    degenerate: bool = False    # resamples < 2: pairwise CD undefined

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def stability_benchmark(scene_specs: list[SceneSpec], n_grid, resamples: int,
                        down_to: int, seed: int, *, k: int = 16,
                        ap_params: ParameterStore | None = None,
                        ap_prefix: str = "ap") -> StabilityReport:
    """Compare down-sampling stability of plain FPS vs attention pooling.

    For each scene and each n in the grid: draw `resamples` independent
    n-point subsets, down-sample each to `down_to` points with both
    methods, average the Chamfer distance over all unordered pairs of the
    resulting clouds, then average over scenes. When no attention
    parameters are supplied, a frozen randomly initialized descriptor MLP
    is used.
    """
    n_grid = [int(n) for n in n_grid]
    if not n_grid or sorted(n_grid) != n_grid:
        raise InvalidArgumentError("n_grid must be a non-empty ascending list")
    if resamples < 1:
        raise InvalidArgumentError("resamples must be >= 1")
    if ap_params is None:
        rng = np.random.default_rng(seed)
        ap_params = ParameterStore()
        ap_params.add_chain("ap", [3, 32, 64], rng)
        ap_prefix = "ap"
    layers = _ap_layers(ap_params, ap_prefix)

    degenerate = resamples < 2
    sums = {"fps": np.zeros(len(n_grid)), "attention": np.zeros(len(n_grid))}
    ss = np.random.SeedSequence(seed)
    scene_seeds = ss.generate_state(len(scene_specs) * (len(n_grid) * resamples * 2 + 1),
                                    dtype=np.uint64) >> 1
    pos = 0
    for spec in scene_specs:
        scene = generate_scene(spec)
        pts = scene.cloud.points
        for ni, n in enumerate(n_grid):
            if n > pts.shape[0]:
                raise InvalidArgumentError(
                    f"grid n={n} exceeds scene point count {pts.shape[0]}"
                )
            outs = {"fps": [], "attention": []}
            for _ in range(resamples):
                sub_seed = int(scene_seeds[pos]); pos += 1
                ds_seed = int(scene_seeds[pos]); pos += 1
                sub = pts[np.random.default_rng(sub_seed).choice(pts.shape[0], size=n, replace=False)]
                outs["fps"].append(downsample_fps(sub, down_to, ds_seed))
                outs["attention"].append(
                    downsample_attention(sub, down_to, k, layers, ds_seed)
                )
            if not degenerate:
                for name, clouds in outs.items():
                    total = 0.0
                    pairs = 0
                    for i in range(len(clouds)):
                        ci = PointCloud(points=clouds[i])
                        for j in range(i + 1, len(clouds)):
                            total += chamfer_distance(ci, PointCloud(points=clouds[j]))
                            pairs += 1
                    sums[name][ni] += total / pairs
        pos += 1  # reserve one stream per scene for future use

    if degenerate:
        methods = {name: [None] * len(n_grid) for name in sums}
    else:
        methods = {name: (vals / len(scene_specs)).tolist() for name, vals in sums.items()}
    return StabilityReport(
        n_grid=n_grid, methods=methods, resamples=resamples,
        scene_count=len(scene_specs), down_to=down_to, seed=seed,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# reports


def make_report(kind: str, config: dict, seeds: dict, metrics: dict) -> dict:
    return {
        "tool_version": __version__,
        "kind": kind,
        "config": config,
        "seeds": seeds,
        "metrics": metrics,
    }


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
