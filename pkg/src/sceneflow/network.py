"""Hour-glass scene-flow network, its loss, the two-iteration feedback
loop, and the segmentation variant used by the stability experiments.

The encoder abstracts both clouds with shared spatial-attention layers,
fuses them with the temporal correlation layer, compresses further with
plain set-abstraction stages, then up-convolves back to per-point features
of the first cloud with skip connections. Shared MLP heads emit a flow
vector and an existence logit per point. A second iteration interpolates
the first flow estimate onto the abstracted points, re-centers the
temporal attended regions with it at a smaller radius, and re-runs the
decoder with the same weights, reusing the cached spatial features.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry
from .attention import (
    FeatureSet,
    flow_interpolate,
    spatial_abstraction,
    temporal_correlation,
)
from .autodiff import Tensor, bce_with_logits, concat
from .errors import (
    InvalidArgumentError,
    ShapeError,
    StateError,
    TrainingDivergenceError,
)
from .geometry import PointCloud, canonical_order, knn_group
from .nn import ParameterStore, shared_mlp


@dataclass
class FlowField:
    """Per-point displacement vectors plus existence probabilities."""

    flow: np.ndarray                  # (N, 3)
    existence: np.ndarray | None      # (N,) in (0, 1), None when the mask head is off

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if not np.all(np.isfinite(self.flow)):
            raise InvalidArgumentError("non-finite flow")
        if self.existence is not None:
            self.existence = np.asarray(self.existence, dtype=np.float64)
            if self.existence.shape != (self.flow.shape[0],):
                raise ShapeError("existence length must match flow")
            if self.existence.min() < 0 or self.existence.max() > 1:
                raise InvalidArgumentError("existence probabilities must lie in [0, 1]")


@dataclass
class NetworkConfig:
    """Architecture and training hyper-parameters for the flow network."""

    n_points: int = 2048
    down_ratios: tuple = (8, 2, 4)       # successive divisors: n/8, n/16, n/64
    k: int = 16                          # neighborhood size for all kNN groupings
    radius1: float = 2.0                 # first-pass temporal search radius
    radius2: float = 0.75                # second-pass (flow-shifted) radius
    ta_cap: int = 16
    interp_k: int = 3
    spatial_width: int = 64
    temporal_width: int = 128
    encoder_widths: tuple = (128, 256)
    upconv_width: int = 128
    pointwise_width: int = 64
    mu: float = 0.8                      # flow-vs-mask mix inside one iteration
    lam: float = 0.7                     # second-iteration emphasis in the total loss
    iterations: int = 2
    use_spatial_attention: bool = True
    use_second_pass: bool = True
    use_mask_head: bool = True

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise InvalidArgumentError("mu and lam must lie in [0, 1]")
        if self.iterations not in (1, 2):
            raise InvalidArgumentError("iterations must be 1 or 2")
        n = self.n_points
        for r in self.down_ratios:
            if n // r < 1:
                raise InvalidArgumentError("down-sample ratios exhaust the cloud")
            n //= r

    @property
    def stage_sizes(self) -> tuple[int, int, int]:
        n = self.n_points
        sizes = []
        for r in self.down_ratios:
            n //= r
            sizes.append(n)
        return tuple(sizes)

    @property
    def effective_iterations(self) -> int:
        return self.iterations if self.use_second_pass else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_ratios"] = list(self.down_ratios)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "down_ratios" in d:
            d["down_ratios"] = tuple(d["down_ratios"])
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


def init_flow_parameters(config: NetworkConfig, seed: int) -> ParameterStore:
    """Fresh parameter store for the flow network."""
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    sw, tw = config.spatial_width, config.temporal_width
    e1, e2 = config.encoder_widths
    uw, pw = config.upconv_width, config.pointwise_width
    if config.use_spatial_attention:
        p.add_chain("sa/ap", [3, 32, sw], rng)
        p.add_chain("sa/pn", [3, sw, sw], rng)
    else:
        p.add_chain("sa_plain/pn", [3, sw, sw], rng)
    p.add_chain("ta", [3 + 2 * sw, tw, tw], rng)
    p.add_chain("enc1/pn", [3 + tw, e1, e1], rng)
    p.add_chain("enc2/pn", [3 + e1, e2, e2], rng)
    p.add_chain("up1/pre", [3 + e2, e2, e2], rng)
    p.add_chain("up1/post", [e2 + e1, uw], rng)
    p.add_chain("up2/pre", [3 + uw, uw, uw], rng)
    p.add_chain("up2/post", [uw + tw, uw], rng)
    p.add_chain("up3/pre", [3 + uw, uw, uw], rng)
    p.add_chain("up3/post", [uw, pw], rng)
    p.add_chain("flow_head", [pw, 3], rng)
    if config.use_mask_head:
        p.add_chain("mask_head", [pw, 1], rng)
    return p


def set_abstraction(features: FeatureSet, m: int, k: int, params: ParameterStore,
                    seed: int, prefix: str) -> FeatureSet:
    """Plain FPS-centered abstraction: FPS -> kNN grouping -> shared
    PointNet over center-subtracted coordinates (plus descriptors) -> max
    pool. FPS is seeded on the canonical coordinate ordering, as in the
    spatial attention layer, so the result is input-order invariant.
    """
    n = len(features)
    if m < 1 or m > n:
        raise InvalidArgumentError(f"m={m} out of range for {n} features")
    pts = features.points.data
    order = canonical_order(pts)
    first = int(np.random.default_rng(seed).integers(n))
    centers_local = geometry._fps_from(pts[order], m, first)
    centers_idx = order[centers_local]

    grouping = knn_group(pts[centers_idx], PointCloud(points=pts), k)
    gidx = np.stack(grouping.member_indices)
    centers = features.points.take(centers_idx)
    local = features.points.take(gidx) - centers.reshape(m, 1, 3)
    rows = concat([local, features.descriptors.take(gidx)], axis=2)
    feat = shared_mlp(params.chain(f"{prefix}/pn"), rows, final_relu=True)
    return FeatureSet(points=centers, descriptors=feat.max(axis=1), kind="spatial")


def set_upconv(coarse: FeatureSet, fine_points, skip: FeatureSet | None,
               k: int, params: ParameterStore, prefix: str) -> FeatureSet:
    """Propagate coarse features to a finer point set.

    Each fine point gathers its k nearest coarse features, runs a shared
    PointNet over relative coordinates + coarse descriptors, max-pools,
    concatenates the skip descriptor when present and applies a final
    shared MLP.
    """
    if len(coarse) == 0:
        raise InvalidArgumentError("set_upconv: empty coarse set")
    fine_t = fine_points if isinstance(fine_points, Tensor) else Tensor(np.asarray(fine_points, dtype=np.float64))
    f = fine_t.shape[0]
    if skip is not None and len(skip) != f:
        raise ShapeError("skip features must align with fine_points")
    grouping = knn_group(fine_t.data, PointCloud(points=coarse.points.data), k)
    gidx = np.stack(grouping.member_indices)
    rel = coarse.points.take(gidx) - fine_t.reshape(f, 1, 3)
    rows = concat([rel, coarse.descriptors.take(gidx)], axis=2)
    feat = shared_mlp(params.chain(f"{prefix}/pre"), rows, final_relu=True)
    pooled = feat.max(axis=1)
    if skip is not None:
        pooled = concat([pooled, skip.descriptors], axis=1)
    out = shared_mlp(params.chain(f"{prefix}/post"), pooled, final_relu=True)
    return FeatureSet(points=fine_t, descriptors=out, kind="pointwise")


@dataclass
class IterationOutput:
    """Raw (still differentiable) outputs of one refinement iteration."""

    flow: Tensor                 # (N, 3)
    mask_logits: Tensor | None   # (N,)

    def to_field(self) -> FlowField:
        existence = None
        if self.mask_logits is not None:
            existence = 1.0 / (1.0 + np.exp(-self.mask_logits.data))
        return FlowField(flow=self.flow.numpy(), existence=existence)


def _layer_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64) >> 1]


def flow_forward(cloud1: PointCloud, cloud2: PointCloud, params: ParameterStore,
                 config: NetworkConfig, seed: int):
    """Run the full network on a cloud pair.

    Returns (list of IterationOutput, intermediates dict). The second
    iteration, when enabled, shifts the temporal attended regions by the
    interpolated first-iteration flow at the reduced radius and re-runs the
    decoder with the same parameters.
    """
    n = len(cloud1)
    if n != config.n_points or len(cloud2) != config.n_points:
        raise StateError(
            f"configured for {config.n_points} points, got {n} / {len(cloud2)}"
        )
    m1, m2, m3 = config.stage_sizes
    seeds = _layer_seeds(seed, 8)

    if config.use_spatial_attention:
        f1 = spatial_abstraction(cloud1, None, m1, config.k, params, seeds[0], "sa")
        f2 = spatial_abstraction(cloud2, None, m1, config.k, params, seeds[1], "sa")
    else:
        f1 = _plain_abstraction(cloud1, m1, config.k, params, seeds[0])
        f2 = _plain_abstraction(cloud2, m1, config.k, params, seeds[1])

    outputs: list[IterationOutput] = []
    intermediates = {"spatial1": f1, "spatial2": f2, "temporal": [], "interp_flow": None}

    for it in range(config.effective_iterations):
        if it == 0:
            init_flow = None
            radius = config.radius1
        else:
            init_flow = flow_interpolate(
                cloud1.points, outputs[0].flow.numpy(), f1.points.data, k=config.interp_k
            )
            intermediates["interp_flow"] = init_flow
            radius = config.radius2
        t = temporal_correlation(f1, f2, init_flow, radius, config.ta_cap, params, "ta")
        intermediates["temporal"].append(t)

        e1 = set_abstraction(t, m2, config.k, params, seeds[2], "enc1")
        e2 = set_abstraction(e1, m3, config.k, params, seeds[3], "enc2")
        u1 = set_upconv(e2, e1.points, e1, config.k, params, "up1")
        u2 = set_upconv(u1, t.points, t, config.k, params, "up2")
        u3 = set_upconv(u2, cloud1.points, None, config.k, params, "up3")

        flow = shared_mlp(params.chain("flow_head"), u3.descriptors)
        mask_logits = None
        if config.use_mask_head:
            mask_logits = shared_mlp(params.chain("mask_head"), u3.descriptors).reshape(n)
        outputs.append(IterationOutput(flow=flow, mask_logits=mask_logits))
    return outputs, intermediates


def _plain_abstraction(cloud: PointCloud, m: int, k: int, params: ParameterStore,
                       seed: int) -> FeatureSet:
    """FPS baseline used when spatial attention is ablated."""
    feats = FeatureSet(points=Tensor(cloud.points),
                       descriptors=Tensor(np.zeros((len(cloud), 0))), kind="pointwise")
    return set_abstraction(feats, m, k, params, seed, "sa_plain")


def flow_loss(outputs: list[IterationOutput], gt_flow, gt_mask,
              mu: float, lam: float):
    """Weighted two-iteration training loss.

    Per iteration: L = mu * L_flow + (1 - mu) * L_mask, where L_flow is the
    mean squared Euclidean flow error and L_mask the mean binary
    cross-entropy of the existence logits. Totals combine as
    (1 - lam) * L1 + lam * L2; a single iteration contributes alone. When
    the mask head is disabled the iteration loss is L_flow.
    """
    if not (0.0 <= mu <= 1.0 and 0.0 <= lam <= 1.0):
        raise InvalidArgumentError("mu and lam must lie in [0, 1]")
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    components = []
    per_iter = []
    for out in outputs:
        if out.flow.shape != gt_flow.shape:
            raise ShapeError("prediction/ground-truth flow shape mismatch")
        diff = out.flow - Tensor(gt_flow)
        l_flow = (diff * diff).sum(axis=1).mean()
        if out.mask_logits is not None:
            if gt_mask is None:
                raise InvalidArgumentError("mask head active but no ground-truth mask")
            l_mask = bce_with_logits(out.mask_logits, np.asarray(gt_mask, dtype=np.float64)).mean()
            l_iter = mu * l_flow + (1.0 - mu) * l_mask
            components.append({"flow": float(l_flow.data), "mask": float(l_mask.data),
                               "iteration": float(l_iter.data)})
        else:
            l_mask = None
            l_iter = l_flow
            components.append({"flow": float(l_flow.data), "mask": None,
                               "iteration": float(l_iter.data)})
        per_iter.append(l_iter)
    if len(per_iter) == 1:
        total = per_iter[0]
    elif len(per_iter) == 2:
        total = (1.0 - lam) * per_iter[0] + lam * per_iter[1]
    else:
        raise InvalidArgumentError("loss defined for one or two iterations")
    return total, components


# ---------------------------------------------------------------------------
# segmentation variant


@dataclass
class SegConfig:
    """Per-point object segmentation network configuration."""

    n_points: int = 512
    num_classes: int = 6
    down_ratios: tuple = (4, 4)
    k: int = 16
    stage_widths: tuple = (64, 128)
    upconv_width: int = 128
    pointwise_width: int = 64
    use_spatial_attention: bool = True

    @property
    def stage_sizes(self) -> tuple[int, int]:
        n = self.n_points
        sizes = []
        for r in self.down_ratios:
            n //= r
            sizes.append(n)
        return tuple(sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_ratios"] = list(self.down_ratios)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        d = dict(d)
        if "down_ratios" in d:
            d["down_ratios"] = tuple(d["down_ratios"])
        if "stage_widths" in d:
            d["stage_widths"] = tuple(d["stage_widths"])
        return cls(**d)


def init_seg_parameters(config: SegConfig, seed: int) -> ParameterStore:
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    w1, w2 = config.stage_widths
    uw, pw = config.upconv_width, config.pointwise_width
    if config.use_spatial_attention:
        p.add_chain("s1/ap", [3, 32, w1], rng)
        p.add_chain("s1/pn", [3, w1, w1], rng)
        p.add_chain("s2/ap", [3, 32, w2], rng)
        p.add_chain("s2/pn", [3 + w1, w2, w2], rng)
    else:
        p.add_chain("s1/pn", [3, w1, w1], rng)
        p.add_chain("s2/pn", [3 + w1, w2, w2], rng)
    p.add_chain("up1/pre", [3 + w2, w2, w2], rng)
    p.add_chain("up1/post", [w2 + w1, uw], rng)
    p.add_chain("up2/pre", [3 + uw, uw, uw], rng)
    p.add_chain("up2/post", [uw, pw], rng)
    p.add_chain("classifier", [pw, config.num_classes], rng)
    return p


def seg_forward(cloud: PointCloud, params: ParameterStore, config: SegConfig,
                seed: int) -> Tensor:
    """Per-point class scores (N, num_classes)."""
    n = len(cloud)
    if n != config.n_points:
        raise StateError(f"configured for {config.n_points} points, got {n}")
    m1, m2 = config.stage_sizes
    seeds = _layer_seeds(seed, 4)
    if config.use_spatial_attention:
        from .attention import _spatial_abstraction_t

        s1 = spatial_abstraction(cloud, None, m1, config.k, params, seeds[0], "s1")
        s2 = _spatial_abstraction_t(s1.points, s1.descriptors, m2,
                                    config.k, params, seeds[1], "s2")
    else:
        s1 = _seg_plain_stage1(cloud, m1, config.k, params, seeds[0])
        s2 = set_abstraction(s1, m2, config.k, params, seeds[1], "s2")
    u1 = set_upconv(s2, s1.points, s1, config.k, params, "up1")
    u2 = set_upconv(u1, cloud.points, None, config.k, params, "up2")
    return shared_mlp(params.chain("classifier"), u2.descriptors)


def _seg_plain_stage1(cloud: PointCloud, m: int, k: int, params: ParameterStore,
                      seed: int) -> FeatureSet:
    feats = FeatureSet(points=Tensor(cloud.points),
                       descriptors=Tensor(np.zeros((len(cloud), 0))), kind="pointwise")
    return set_abstraction(feats, m, k, params, seed, "s1")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParameterStore
    log: list = field(default_factory=list)


def _snapshot(params: ParameterStore) -> dict:
    return {name: t.data.copy() for name, t in params.tensors()}


def train(task: str, dataset, config, seed: int, *, epochs: int = 10,
          batch_size: int = 8, lr: float = 0.001, betas=(0.9, 0.999),
          eps: float = 1e-8, params: ParameterStore | None = None,
          on_epoch=None) -> TrainResult:
    """Deterministic mini-batch Adam training.

    `task` is "flow" (dataset of ScenePair-like objects exposing cloud1,
    cloud2, gt_flow, gt_mask) or "segmentation" (dataset of labeled
    PointClouds). Gradients are averaged over the batch in canonical
    element order. A non-finite loss aborts with the last finite snapshot
    attached to the raised error.
    """
    if task not in ("flow", "segmentation"):
        raise InvalidArgumentError(f"unknown task {task!r}")
    if len(dataset) == 0:
        raise InvalidArgumentError("empty dataset")
    if params is None:
        if task == "flow":
            params = init_flow_parameters(config, seed)
        else:
            params = init_seg_parameters(config, seed)
    rng = np.random.default_rng(seed)
    log: list[dict] = []
    last_good = _snapshot(params)

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            params.zero_grad()
            batch_loss = 0.0
            for j in batch:
                sample_seed = int(rng.integers(2**62))
                if task == "flow":
                    pair = dataset[j]
                    outs, _ = flow_forward(pair.cloud1, pair.cloud2, params, config, sample_seed)
                    loss, _ = flow_loss(outs, pair.gt_flow,
                                        pair.gt_mask if config.use_mask_head else None,
                                        config.mu, config.lam)
                else:
                    cloud = dataset[j]
                    scores = seg_forward(cloud, params, config, sample_seed)
                    loss = _cross_entropy(scores, cloud.labels)
                if not np.isfinite(loss.data):
                    raise TrainingDivergenceError(
                        f"non-finite loss at epoch {epoch}", last_good=last_good
                    )
                loss.backward()
                batch_loss += float(loss.data)
            params.scale_grad(1.0 / len(batch))
            params.adam_step(lr=lr, betas=betas, eps=eps)
            epoch_loss += batch_loss / len(batch)
            batches += 1
        entry = {"epoch": epoch, "loss": epoch_loss / batches}
        if on_epoch is not None:
            extra = on_epoch(params, epoch)
            if extra:
                entry.update(extra)
        log.append(entry)
        last_good = _snapshot(params)
    return TrainResult(params=params, log=log)


def _cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over per-point class scores."""
    n = scores.shape[0]
    shift = Tensor(scores.data.max(axis=1, keepdims=True))  # constant offset
    lse = (scores - shift).exp().sum(axis=1, keepdims=True).log() + shift
    logp = scores - lse
    picked = logp[np.arange(n), np.asarray(labels, dtype=np.int64)]
    return -picked.mean()


def seg_predict(cloud: PointCloud, params: ParameterStore, config: SegConfig,
                seed: int) -> np.ndarray:
    return np.argmax(seg_forward(cloud, params, config, seed).data, axis=1)


def seg_accuracy(clouds, params: ParameterStore, config: SegConfig, seed: int) -> float:
    """Mean per-point label accuracy over a list of labeled clouds."""
    correct = total = 0
    seeds = _layer_seeds(seed, len(clouds))
    for s, cloud in zip(seeds, clouds):
        pred = seg_predict(cloud, params, config, s)
        correct += int((pred == cloud.labels).sum())
        total += len(cloud)
    return correct / total
