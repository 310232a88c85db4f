import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from iagaze.data import Fixation, FixationSet, HOISample, fixations_to_heatmap
from iagaze.errors import MetricError
from iagaze.metrics import auc, cc, evaluate, fixation_mask, kldiv, sample_metrics, sim, write_report, MetricReport


def _fix(cells, sid="s"):
    return FixationSet(sid, [Fixation(float(c), float(r), "a") for r, c in cells])


class TestCC:
    def test_self(self, rng):
        m = rng.random((6, 5))
        assert cc(m, m) == pytest.approx(1.0, abs=1e-12)

    def test_affine_anticorrelation(self, rng):
        m = rng.random((6, 5))
        assert cc(3.0 - m, m) == pytest.approx(-1.0, abs=1e-12)

    def test_two_by_two_oracle(self):
        p, g = [[1, 2], [3, 4]], [[1, 1], [2, 4]]
        assert cc(np.array(p), np.array(g)) == pytest.approx(oracles.cc(p, g), abs=1e-12)

    def test_constant_is_zero_with_warning(self):
        with pytest.warns(RuntimeWarning):
            assert cc(np.ones((3, 3)), np.eye(3)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            cc(np.ones((2, 2)), np.ones((3, 2)))


class TestKL:
    def test_self_near_zero(self, rng):
        m = rng.random((5, 5)) + 0.01
        assert abs(kldiv(m, m)) <= 1e-9

    def test_delta_gt_uniform_pred(self):
        gt = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert kldiv(np.ones((2, 2)), gt) == pytest.approx(math.log(4), abs=1e-6)

    def test_uniform_gt_delta_pred(self):
        pred = np.array([[1.0, 0.0], [0.0, 0.0]])
        got = kldiv(pred, np.ones((2, 2)))
        assert got > 10
        assert got == pytest.approx(oracles.kldiv(pred, np.ones((2, 2))), rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(MetricError):
            kldiv(np.array([[-1.0, 2.0]]), np.ones((1, 2)))


class TestSIM:
    def test_self(self, rng):
        m = rng.random((4, 4))
        assert sim(m, m) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint(self):
        assert sim(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 0.0

    def test_half_overlap(self):
        assert sim(np.array([[0.5, 0.5, 0, 0]]), np.full((1, 4), 0.25)) == pytest.approx(0.5, abs=1e-15)


class TestAUC:
    def test_perfect_ranking(self):
        pred = np.zeros((3, 3))
        pred[0, 0] = pred[2, 1] = 1.0
        assert auc(pred, _fix([(0, 0), (2, 1)])) == 1.0

    def test_constant_is_chance(self):
        assert auc(np.full((4, 4), 0.3), _fix([(1, 2)])) == 0.5

    def test_random_three_by_three_pairwise(self, rng):
        for _ in range(20):
            pred = rng.integers(0, 4, (3, 3)) / 4.0  # ties on purpose
            cells = {(0, 1), (2, 2)}
            assert auc(pred, _fix(cells)) == pytest.approx(oracles.auc_pairwise(pred, cells), abs=1e-12)

    def test_no_fixations(self):
        with pytest.raises(MetricError):
            auc(np.ones((2, 2)), FixationSet("s"))

    def test_mask_rounds_to_nearest_pixel(self):
        m = fixation_mask(FixationSet("s", [Fixation(1.4, 0.6, "a")]), 2, 3)
        assert m.tolist() == [[False, False, False], [False, True, False]]

    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 8)))
    @settings(max_examples=50, deadline=None)
    def test_invariant_to_monotone_transform(self, ranks):
        pred = ranks / 8.0
        fix = _fix([(0, 0), (3, 2)])
        assert auc(pred, fix) == pytest.approx(auc(pred ** 3 * 5 + 1, fix), abs=1e-12)


@given(arrays(np.float64, (4, 4), elements=st.floats(0.01, 1)), st.floats(0.1, 10), st.floats(0, 5))
@settings(max_examples=50, deadline=None)
def test_cc_affine_invariant(m, a, b):
    g = np.arange(16.0).reshape(4, 4)
    if m.std() < 1e-6:
        return
    assert cc(a * m + b, g) == pytest.approx(cc(m, g), abs=1e-9)


@given(arrays(np.float64, (3, 3), elements=st.floats(0.01, 1)), arrays(np.float64, (3, 3), elements=st.floats(0.01, 1)))
@settings(max_examples=50, deadline=None)
def test_sim_bounded_and_kl_nonnegative(p, g):
    assert 0.0 <= sim(p, g) <= 1.0 + 1e-12
    assert kldiv(p, g) >= -1e-9


def _records(n=3, w=12, h=10):
    out = []
    for i in range(n):
        s = HOISample(f"e{i}", "x.png", w, h, (0, 0, 5, 5), (5, 5, 10, 9), "cup", "hold")
        out.append((s, FixationSet(s.sample_id, [Fixation(2.0 + i, 3.0, "a"), Fixation(8.0, 6.0 - i, "b")])))
    return out


class TestEvaluate:
    def test_singleton_equals_sample_metrics(self, rng):
        recs = _records(1)
        pred = rng.random((10, 12))
        report, rows = evaluate(recs, {"e0": pred}, sigma=2.0)
        gt = fixations_to_heatmap(recs[0][1], 12, 10, 2.0)
        expected = sample_metrics(pred, gt, recs[0][1])
        assert report.n_samples == 1
        for k, v in expected.items():
            assert getattr(report, k) == v

    def test_oracle_predictor(self):
        recs = _records(3)
        fixations = {s.sample_id: f for s, f in recs}
        report, _ = evaluate(recs, lambda s: fixations_to_heatmap(fixations[s.sample_id], 12, 10, 2.0), sigma=2.0)
        assert report.cc == pytest.approx(1.0, abs=1e-12)
        assert abs(report.kldiv) <= 1e-9
        assert report.sim == pytest.approx(1.0, abs=1e-12)

    def test_missing_prediction_lists_ids(self):
        with pytest.raises(MetricError, match="e1"):
            evaluate(_records(2), {"e0": np.ones((10, 12))})

    def test_resizes_and_parallel_matches_serial(self, rng, tmp_path):
        preds = {f"e{i}": rng.random((5, 6)) for i in range(3)}
        a, rows_a = evaluate(_records(), preds, sigma=2.0, jobs=1)
        b, rows_b = evaluate(_records(), preds, sigma=2.0, jobs=3, csv_path=tmp_path / "rows.csv")
        assert rows_a == rows_b and a == b
        assert (tmp_path / "rows.csv").read_text().splitlines()[0] == "sample_id,cc,kldiv,sim,auc"

    def test_report_json(self, tmp_path):
        write_report(MetricReport(0.1, 0.2, 0.3, 0.4, 2), tmp_path / "r.json")
        assert '"n_samples": 2' in (tmp_path / "r.json").read_text()
