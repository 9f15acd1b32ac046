"""Metrics, magnitude-binned errors, stability benchmark, reports."""

import numpy as np
import pytest

from sceneflow.errors import InvalidArgumentError
from sceneflow.evalbench import (
    RELATIVE_ERROR_GUARD,
    downsample_attention,
    downsample_fps,
    flow_metrics,
    magnitude_binned_error,
    make_report,
    read_report,
    stability_benchmark,
    write_csv,
    write_report,
)
from sceneflow.network import FlowField
from sceneflow.synthdata import SceneSpec


def metrics_oracle(pred, gt, mask=None):
    """Independent per-point evaluation of EPE / Acc Strict / Acc Relax."""
    err = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    rel = err / (np.sqrt((gt ** 2).sum(axis=1)) + 1e-9)
    sel = np.ones(len(err), dtype=bool) if mask is None else mask

    def acc(e, r, dist, frac):
        hit = (err[sel] < dist) | (rel[sel] < frac)
        return 100.0 * hit.mean()

    return (err[sel].mean(), acc(err, rel, 0.05, 0.05), acc(err, rel, 0.1, 0.1))


class TestFlowMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).normal(size=(10, 3))
        m = flow_metrics(gt, gt)
        assert m.epe == 0.0
        assert m.acc_strict == 100.0 and m.acc_relax == 100.0

    def test_unit_error_all_misses(self):
        gt = np.tile([1.0, 0.0, 0.0], (8, 1))
        m = flow_metrics(np.zeros_like(gt), gt)
        assert m.epe == pytest.approx(1.0)
        assert m.acc_strict == 0.0 and m.acc_relax == 0.0

    def test_strict_via_both_clauses(self):
        """gt (1,0,0), pred (0.96,0,0): EPE 0.04 < 0.05 AND rel 4% < 5%."""
        gt = np.array([[1.0, 0.0, 0.0]])
        pred = np.array([[0.96, 0.0, 0.0]])
        m = flow_metrics(pred, gt)
        assert m.epe == pytest.approx(0.04)
        assert m.acc_strict == 100.0

    def test_strict_via_relative_clause_only(self):
        """Large-magnitude flow: absolute error 0.08 > 0.05 but rel 4% < 5%."""
        gt = np.array([[2.0, 0.0, 0.0]])
        pred = np.array([[2.08, 0.0, 0.0]])
        m = flow_metrics(pred, gt)
        assert m.acc_strict == 100.0

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(500, 3)) * rng.uniform(0, 2, size=(500, 1))
        pred = gt + rng.normal(size=(500, 3)) * 0.05
        mask = rng.uniform(size=500) > 0.4
        m = flow_metrics(pred, gt, mask)
        epe, s, r = metrics_oracle(pred, gt)
        assert m.epe == pytest.approx(epe, abs=1e-12)
        assert m.acc_strict == pytest.approx(s, abs=1e-12)
        assert m.acc_relax == pytest.approx(r, abs=1e-12)
        mepe, ms, mr = metrics_oracle(pred, gt, mask)
        assert m.masked_epe == pytest.approx(mepe, abs=1e-12)
        assert m.masked_acc_strict == pytest.approx(ms, abs=1e-12)
        assert m.masked_acc_relax == pytest.approx(mr, abs=1e-12)

    def test_zero_flow_zero_error_counts_accurate(self):
        gt = np.zeros((3, 3))
        m = flow_metrics(np.zeros((3, 3)), gt)
        assert m.acc_strict == 100.0

    def test_accepts_flow_field(self):
        gt = np.zeros((2, 3))
        field = FlowField(flow=gt.copy(), existence=None)
        assert flow_metrics(field, gt).epe == 0.0

    def test_all_false_mask_gives_none(self):
        gt = np.zeros((2, 3))
        m = flow_metrics(gt, gt, np.zeros(2, dtype=bool))
        assert m.masked_epe is None

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            flow_metrics(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_mask_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            flow_metrics(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3, dtype=bool))


class TestMagnitudeBinnedError:
    def test_single_bin_equals_overall_mean(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(50, 3))
        pred = gt + 0.1 * rng.normal(size=(50, 3))
        stats = magnitude_binned_error(pred, gt, [0.0, 100.0])
        err = np.linalg.norm(pred - gt, axis=1)
        rel = err / (np.linalg.norm(gt, axis=1) + RELATIVE_ERROR_GUARD)
        assert stats[0].count == 50
        assert stats[0].mean_relative_error == pytest.approx(rel.mean(), abs=1e-12)

    def test_perfect_prediction_zeroes(self):
        gt = np.random.default_rng(1).normal(size=(20, 3))
        stats = magnitude_binned_error(gt, gt, [0.0, 1.0, 100.0])
        for s in stats:
            if s.count:
                assert s.mean_relative_error == 0.0

    def test_constructed_two_bin_fixture(self):
        """Bin 1 has relative error 0.1 exactly; bin 2 has 0.3 exactly."""
        gt = np.array([[0.5, 0, 0], [0.5, 0, 0], [2.0, 0, 0]])
        rels = np.array([0.1, 0.1, 0.3])
        pred = gt.copy()
        mags = np.linalg.norm(gt, axis=1)
        pred[:, 0] += rels * (mags + RELATIVE_ERROR_GUARD)
        stats = magnitude_binned_error(pred, gt, [0.0, 1.0, 3.0])
        assert stats[0].count == 2 and stats[1].count == 1
        assert stats[0].mean_relative_error == pytest.approx(0.1, abs=1e-12)
        assert stats[1].mean_relative_error == pytest.approx(0.3, abs=1e-12)

    def test_empty_bin_reports_none(self):
        gt = np.array([[5.0, 0, 0]])
        stats = magnitude_binned_error(gt, gt, [0.0, 1.0, 10.0])
        assert stats[0].count == 0 and stats[0].mean_relative_error is None
        assert stats[1].count == 1

    def test_last_bin_closed(self):
        gt = np.array([[2.0, 0, 0]])
        stats = magnitude_binned_error(gt, gt, [0.0, 1.0, 2.0])
        assert stats[1].count == 1

    def test_unsorted_edges(self):
        with pytest.raises(InvalidArgumentError):
            magnitude_binned_error(np.zeros((1, 3)), np.zeros((1, 3)), [0.0, 2.0, 1.0])

    def test_single_edge(self):
        with pytest.raises(InvalidArgumentError):
            magnitude_binned_error(np.zeros((1, 3)), np.zeros((1, 3)), [0.0])


# ---------------------------------------------------------------------------
# stability benchmark


def bench_specs(count=2, points=600):
    return [SceneSpec(points_per_scene=points, seed=s) for s in range(count)]


class TestStability:
    def test_downsample_determinism_zero_cd(self):
        """Identical input + seed gives byte-identical down-samples; their
        Chamfer distance is exactly 0 (the degenerate-resampling example)."""
        pts = np.random.default_rng(0).normal(size=(300, 3))
        a = downsample_fps(pts, 32, seed=4)
        b = downsample_fps(pts, 32, seed=4)
        assert np.array_equal(a, b)
        layers = [(np.random.default_rng(1).normal(size=(3, 8)), np.zeros(8)),
                  (np.random.default_rng(2).normal(size=(8, 8)), np.zeros(8))]
        c = downsample_attention(pts, 32, 8, layers, seed=4)
        d = downsample_attention(pts, 32, 8, layers, seed=4)
        assert np.array_equal(c, d)

    def test_degenerate_single_resample(self):
        report = stability_benchmark(bench_specs(1), [128], resamples=1,
                                     down_to=16, seed=0)
        assert report.degenerate
        assert report.methods["fps"] == [None]
        assert report.methods["attention"] == [None]

    def test_report_fields_and_reproducibility(self):
        kwargs = dict(n_grid=[64, 128], resamples=3, down_to=16, seed=9, k=8)
        a = stability_benchmark(bench_specs(2), **kwargs)
        b = stability_benchmark(bench_specs(2), **kwargs)
        assert a.to_dict() == b.to_dict()   # bit-identical given seeds
        assert a.chamfer_convention == "squared"
        assert set(a.methods) == {"fps", "attention"}
        for vals in a.methods.values():
            assert len(vals) == 2
            assert all(v >= 0 for v in vals)

    def test_grid_validation(self):
        with pytest.raises(InvalidArgumentError):
            stability_benchmark(bench_specs(1), [128, 64], 2, 16, 0)
        with pytest.raises(InvalidArgumentError):
            stability_benchmark(bench_specs(1), [], 2, 16, 0)
        with pytest.raises(InvalidArgumentError):
            stability_benchmark(bench_specs(1), [64], 0, 16, 0)

    def test_grid_exceeding_scene_size(self):
        with pytest.raises(InvalidArgumentError):
            stability_benchmark(bench_specs(1, points=100), [200], 2, 16, 0)


# ---------------------------------------------------------------------------
# reports


class TestReports:
    def test_round_trip_identical(self, tmp_path):
        report = make_report("eval", {"k": 16}, {"seed": 3},
                             {"epe": 0.123, "bins": [1, None, 2.5]})
        path = tmp_path / "r.json"
        write_report(path, report)
        assert read_report(path) == report

    def test_write_twice_byte_identical(self, tmp_path):
        report = make_report("stability", {"a": 1}, {"seed": 0}, {"x": [0.5]})
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_report(p1, report)
        write_report(p2, report)
        assert p1.read_bytes() == p2.read_bytes()

    def test_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        write_csv(path, ["n", "v"], [[1, 0.5], [2, ""]])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "n,v"
        assert lines[1] == "1,0.5"
