"""Attention pooling, spatial/temporal abstraction layers, flow interpolation."""

import numpy as np
import pytest

from sceneflow.attention import (
    FeatureSet,
    attention_pool,
    flow_interpolate,
    spatial_abstraction,
    temporal_correlation,
)
from sceneflow.autodiff import Tensor
from sceneflow.errors import (
    InvalidArgumentError,
    InvalidInputError,
    ShapeError,
)
from sceneflow.geometry import PointCloud, radius_group
from sceneflow.nn import ParameterStore, gradient_check


def sa_params(width=8, seed=0, jitter=0.05, prefix="sa"):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    store.add_chain(f"{prefix}/ap", [3, 8, width], rng)
    store.add_chain(f"{prefix}/pn", [3, width, width], rng)
    if jitter:
        jrng = np.random.default_rng(seed + 1)
        for _, t in store.tensors():
            t.data += jitter * jrng.normal(size=t.data.shape)
    return store


def feature_set(n, width, seed, kind="spatial", scale=1.0):
    rng = np.random.default_rng(seed)
    return FeatureSet(points=Tensor(rng.normal(size=(n, 3)) * scale),
                      descriptors=Tensor(rng.normal(size=(n, width))),
                      kind=kind)


# ---------------------------------------------------------------------------
# attention pooling (Eq. 3)


class TestAttentionPool:
    def test_identical_descriptors_centroid(self):
        pts = np.random.default_rng(0).normal(size=(5, 3))
        descs = np.tile([0.3, -0.2], (5, 1))
        out = attention_pool(pts, descs, np.array([1.0, 1.0]))
        assert np.allclose(out.weights.data, 0.2)
        assert np.allclose(out.synthesized_point.data, pts.mean(axis=0), atol=1e-12)

    def test_single_point_weight_one(self):
        out = attention_pool(np.array([[1.0, 2.0, 3.0]]),
                             np.array([[0.5]]), np.array([2.0]))
        assert out.weights.data[0] == pytest.approx(1.0)
        assert np.allclose(out.synthesized_point.data, [1.0, 2.0, 3.0])

    def test_softmax_of_known_logits(self):
        """Logits (0, ln2, ln4) must give weights (1/7, 2/7, 4/7)."""
        pts = np.eye(3)
        descs = np.array([[0.0], [np.log(2.0)], [np.log(4.0)]])
        out = attention_pool(pts, descs, np.array([1.0]))
        assert np.allclose(out.weights.data, [1 / 7, 2 / 7, 4 / 7], atol=1e-12)
        assert np.allclose(out.synthesized_point.data, [1 / 7, 2 / 7, 4 / 7],
                           atol=1e-12)

    def test_weights_simplex_and_hull(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            pts = rng.normal(size=(6, 3))
            descs = rng.normal(size=(6, 4))
            out = attention_pool(pts, descs, rng.normal(size=4))
            w = out.weights.data
            assert np.all(w >= 0) and np.all(w <= 1)
            assert abs(w.sum() - 1.0) < 1e-9
            p = out.synthesized_point.data
            assert np.all(p >= pts.min(axis=0) - 1e-12)
            assert np.all(p <= pts.max(axis=0) + 1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            attention_pool(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(3))

    def test_desc_row_mismatch(self):
        with pytest.raises(ShapeError):
            attention_pool(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros(4))

    def test_non_finite_descriptor(self):
        with pytest.raises(InvalidInputError):
            attention_pool(np.zeros((2, 3)),
                           np.array([[np.inf], [0.0]]), np.zeros(1))

    def test_differentiable(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(4, 3))
        descs = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        gdesc = Tensor(rng.normal(size=3), requires_grad=True)

        def build():
            out = attention_pool(pts, descs, gdesc)
            return (out.synthesized_point * out.synthesized_point).sum()

        assert gradient_check(build, [("descs", descs), ("g", gdesc)]) < 1e-6


# ---------------------------------------------------------------------------
# spatial abstraction (SA^2)


class TestSpatialAbstraction:
    def test_single_group_inside_bounding_box(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(12, 3)) * 0.1 + 5.0
        cloud = PointCloud(points=pts)
        out = spatial_abstraction(cloud, None, 1, 12, sa_params(), seed=3)
        p = out.points.data[0]
        assert np.all(p >= pts.min(axis=0) - 1e-12)
        assert np.all(p <= pts.max(axis=0) + 1e-12)

    def test_output_contract(self):
        cloud = PointCloud(points=np.random.default_rng(1).normal(size=(40, 3)))
        out = spatial_abstraction(cloud, None, 8, 4, sa_params(), seed=3)
        assert out.kind == "spatial"
        assert out.points.shape == (8, 3)
        assert out.descriptors.shape == (8, 8)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(48, 3))
        params = sa_params(seed=4)
        a = spatial_abstraction(PointCloud(points=pts), None, 8, 5, params, seed=9)
        perm = rng.permutation(48)
        b = spatial_abstraction(PointCloud(points=pts[perm]), None, 8, 5, params, seed=9)
        assert np.allclose(a.points.data, b.points.data, atol=1e-6)
        assert np.allclose(a.descriptors.data, b.descriptors.data, atol=1e-6)

    def test_m_out_of_range(self):
        cloud = PointCloud(points=np.zeros((3, 3)) + np.arange(3)[:, None])
        with pytest.raises(InvalidArgumentError):
            spatial_abstraction(cloud, None, 4, 2, sa_params(), seed=0)

    def test_in_features_must_align(self):
        cloud = PointCloud(points=np.random.default_rng(0).normal(size=(10, 3)))
        feats = feature_set(9, 8, 1)
        with pytest.raises(ShapeError):
            spatial_abstraction(cloud, feats, 2, 3, sa_params(), seed=0)

    def test_gradients(self):
        params = sa_params(seed=6)
        cloud = PointCloud(points=np.random.default_rng(7).normal(size=(20, 3)))

        def build():
            out = spatial_abstraction(cloud, None, 4, 3, params, seed=2)
            return (out.descriptors * out.descriptors).mean() \
                + (out.points * out.points).mean()

        assert gradient_check(build, params.tensors()) < 1e-4


# ---------------------------------------------------------------------------
# temporal correlation (TA^2)


def ta_params(width=8, in_width=3 + 2 * 4, seed=0, jitter=0.05):
    store = ParameterStore()
    store.add_chain("ta", [in_width, width, width], np.random.default_rng(seed))
    if jitter:
        jrng = np.random.default_rng(seed + 1)
        for _, t in store.tensors():
            t.data += jitter * jrng.normal(size=t.data.shape)
    return store


class TestTemporalCorrelation:
    def test_coincident_sets_contain_twin(self):
        f1 = feature_set(10, 4, 0)
        f2 = FeatureSet(points=Tensor(f1.points.data.copy()),
                        descriptors=Tensor(f1.descriptors.data.copy()),
                        kind="spatial")
        grouping = radius_group(f1.points.data, PointCloud(points=f2.points.data),
                                radius=1e-6, cap=4)
        for i, members in enumerate(grouping.member_indices):
            assert i in members
        out = temporal_correlation(f1, f2, None, radius=1e-6, cap=4, params=ta_params())
        assert out.kind == "temporal"
        assert np.array_equal(out.points.data, f1.points.data)

    def test_shifted_groups_contain_true_correspondent(self):
        """feat2 = feat1 + t with initial_flow = t: each attended group holds
        the translated twin even when the radius is below the shift length."""
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(12, 3)) * 3.0
        t = np.array([4.0, 0.0, 0.0])
        flow = np.tile(t, (12, 1))
        centers = pts + flow
        grouping = radius_group(centers, PointCloud(points=pts + t), 0.5, cap=6)
        for i, members in enumerate(grouping.member_indices):
            assert i in members

    def test_second_iteration_groups_subset_of_first(self):
        """r2 < r1 on the shifted scene: every flow-shifted r2 group is a
        subset of the flow-shifted r1 group of the same center."""
        rng = np.random.default_rng(2)
        pts2 = rng.normal(size=(30, 3)) * 2.0
        centers = rng.normal(size=(6, 3)) * 2.0
        cloud2 = PointCloud(points=pts2)
        g1 = radius_group(centers, cloud2, radius=2.0, cap=30)
        g2 = radius_group(centers, cloud2, radius=0.75, cap=30)
        for a, b in zip(g2.member_indices, g1.member_indices):
            assert set(a).issubset(set(b))

    def test_translation_equivariance(self):
        params = ta_params(seed=3)
        f1 = feature_set(8, 4, 4, scale=0.8)
        f2 = feature_set(14, 4, 5, scale=0.8)
        base = temporal_correlation(f1, f2, None, 2.5, 6, params)
        shift = np.array([1.5, -2.0, 0.5])
        f1s = FeatureSet(points=Tensor(f1.points.data + shift),
                         descriptors=f1.descriptors, kind="spatial")
        f2s = FeatureSet(points=Tensor(f2.points.data + shift),
                         descriptors=f2.descriptors, kind="spatial")
        moved = temporal_correlation(f1s, f2s, None, 2.5, 6, params)
        assert np.allclose(moved.descriptors.data, base.descriptors.data, atol=1e-9)
        assert np.allclose(moved.points.data, base.points.data + shift)

    def test_flow_length_mismatch(self):
        f1 = feature_set(6, 4, 0)
        f2 = feature_set(6, 4, 1)
        with pytest.raises(InvalidArgumentError):
            temporal_correlation(f1, f2, np.zeros((5, 3)), 1.0, 4, ta_params())

    def test_gradients(self):
        params = ta_params(seed=9)
        rng = np.random.default_rng(10)
        f1 = FeatureSet(points=Tensor(rng.normal(size=(6, 3))),
                        descriptors=Tensor(rng.normal(size=(6, 4)), requires_grad=True),
                        kind="spatial")
        f2 = FeatureSet(points=Tensor(rng.normal(size=(9, 3))),
                        descriptors=Tensor(rng.normal(size=(9, 4)), requires_grad=True),
                        kind="spatial")

        def build():
            out = temporal_correlation(f1, f2, None, 2.0, 4, params)
            return (out.descriptors * out.descriptors).mean()

        tensors = params.tensors() + [("d1", f1.descriptors), ("d2", f2.descriptors)]
        assert gradient_check(build, tensors) < 1e-4


# ---------------------------------------------------------------------------
# flow interpolation


class TestFlowInterpolate:
    def test_uniform_flow(self):
        src = np.random.default_rng(0).normal(size=(10, 3))
        flow = np.tile([0.5, -1.0, 2.0], (10, 1))
        qry = np.random.default_rng(1).normal(size=(4, 3))
        out = flow_interpolate(src, flow, qry, k=3)
        assert np.allclose(out, [0.5, -1.0, 2.0])

    def test_coincident_query_k1(self):
        src = np.array([[0.0, 0, 0], [5.0, 0, 0]])
        flow = np.array([[1.0, 0, 0], [9.0, 0, 0]])
        out = flow_interpolate(src, flow, src[:1], k=1)
        assert np.allclose(out, [[1.0, 0, 0]])

    def test_equidistant_mean(self):
        src = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        flow = np.array([[1.0, 0, 0], [0.0, 1.0, 0]])
        out = flow_interpolate(src, flow, np.zeros((1, 3)), k=2)
        assert np.allclose(out, [[0.5, 0.5, 0.0]])

    def test_empty_source(self):
        with pytest.raises(InvalidArgumentError):
            flow_interpolate(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((1, 3)))

    def test_flow_alignment_checked(self):
        with pytest.raises(InvalidArgumentError):
            flow_interpolate(np.zeros((3, 3)), np.zeros((2, 3)), np.zeros((1, 3)))

    def test_bad_k(self):
        with pytest.raises(InvalidArgumentError):
            flow_interpolate(np.zeros((3, 3)), np.zeros((3, 3)),
                             np.zeros((1, 3)), k=0)


class TestFeatureSet:
    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError):
            FeatureSet(points=Tensor(np.zeros((3, 3))),
                       descriptors=Tensor(np.zeros((2, 4))), kind="spatial")

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            FeatureSet(points=Tensor(np.zeros((2, 3))),
                       descriptors=Tensor(np.zeros((2, 4))), kind="bogus")
