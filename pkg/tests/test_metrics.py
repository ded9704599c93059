import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pebal.core import IGNORE, LabelMap
from pebal.metrics import (
    EvalReport,
    ScoredPixels,
    UndefinedMetricError,
    auroc,
    average_precision,
    calibration,
    calibration_from_pairs,
    evaluate,
    fpr_at_tpr,
    miou,
    threshold_at_tpr,
)


def sp(scores, labels):
    return ScoredPixels(np.array(scores, float), np.array(labels, bool))


class TestAUROC:
    def test_perfect(self):
        assert auroc(sp([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])) == 1.0

    def test_all_tied(self):
        assert auroc(sp([0.4] * 6, [1, 0, 1, 0, 0, 1])) == 0.5

    def test_concordant_pairs(self):
        assert auroc(sp([0.9, 0.1, 0.8, 0.3], [1, 0, 0, 1])) == pytest.approx(0.75)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc(sp([0.1, 0.2], [1, 1]))


class TestAP:
    def test_perfect(self):
        assert average_precision(sp([0.9, 0.1], [1, 0])) == 1.0

    def test_hand_enumeration(self):
        assert average_precision(sp([0.9, 0.8, 0.7], [1, 0, 1])) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            average_precision(sp([0.1, 0.2], [0, 0]))


class TestFPR:
    def test_perfect(self):
        assert fpr_at_tpr(sp([0.9, 0.8, 0.2], [1, 1, 0])) == 0.0

    def test_enumerated(self):
        assert fpr_at_tpr(sp([0.9, 0.8, 0.7, 0.2], [1, 1, 0, 0])) == 0.0
        assert fpr_at_tpr(sp([0.9, 0.8, 0.8, 0.2], [1, 1, 0, 0])) == 0.5

    def test_anti_perfect(self):
        assert fpr_at_tpr(sp([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])) == 1.0

    def test_threshold_reaches_recall(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=500)
        y = rng.random(500) < 0.3
        tau = threshold_at_tpr(sp(s, y), 0.95)
        assert np.mean(s[y] >= tau) >= 0.95


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_brute_force_oracle(seed):
    s, y = oracles.random_instance(np.random.default_rng(seed))
    p = sp(s, y)
    assert abs(auroc(p) - oracles.auroc(s, y)) <= 1e-9
    assert abs(average_precision(p) - oracles.average_precision(s, y)) <= 1e-9
    assert abs(fpr_at_tpr(p) - oracles.fpr_at_tpr(s, y)) <= 1e-9


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_invariant_to_monotone_transform_and_order(seed):
    rng = np.random.default_rng(seed)
    s, y = oracles.random_instance(rng)
    perm = rng.permutation(len(s))
    a, b = sp(s, y), sp(np.exp(2 * s[perm]) + 1, y[perm])
    assert auroc(a) == pytest.approx(auroc(b), abs=1e-12)
    assert average_precision(a) == pytest.approx(average_precision(b), abs=1e-12)
    assert fpr_at_tpr(a) == pytest.approx(fpr_at_tpr(b), abs=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_ranges_and_flip(seed):
    s, y = oracles.random_instance(np.random.default_rng(seed))
    a = auroc(sp(s, y))
    assert 0 <= a <= 1 and 0 <= average_precision(sp(s, y)) <= 1
    assert auroc(sp(-s, y)) == pytest.approx(1 - a, abs=1e-12)


class TestMIoU:
    def test_identical(self):
        gt = LabelMap(np.array([[1, 2], [3, 3]]), 3)
        assert miou(gt.labels, gt) == 1.0

    def test_disjoint(self):
        gt = LabelMap(np.ones((2, 2), int), 2)
        assert miou(np.full((2, 2), 2), gt) == 0.0

    def test_checkerboard_half_wrong(self):
        gt = LabelMap(np.array([[1, 1], [2, 2]]), 2)
        pred = np.array([[1, 2], [2, 1]])
        # each class: TP 1, FP 1, FN 1
        assert miou(pred, gt) == pytest.approx(1 / 3)

    def test_ignore_and_anomaly_skipped(self):
        gt = LabelMap(np.array([[1, IGNORE], [3, 2]]), 2)
        assert miou(np.array([[1, 2], [1, 2]]), gt) == 1.0


class TestCalibration:
    def test_confident_correct(self):
        p = np.zeros((2, 2, 3))
        p[:, :, 0] = 1.0
        assert calibration(p, np.ones((2, 2), int)) == (0.0, 0.0)

    def test_calibrated(self):
        conf = np.full(10, 0.6)
        correct = np.array([1] * 6 + [0] * 4, bool)
        ece, mce = calibration_from_pairs(conf, correct)
        assert ece == pytest.approx(0.0, abs=1e-12) and mce == pytest.approx(0.0, abs=1e-12)

    def test_two_bins_by_hand(self):
        # bins of width 0.5; (0, .5] holds conf .3, .4 with one correct;
        # (.5, 1] holds .9, .9, .8 with three correct
        conf = np.array([0.3, 0.4, 0.9, 0.9, 0.8])
        correct = np.array([1, 0, 1, 1, 1], bool)
        ece, mce = calibration_from_pairs(conf, correct, bins=2)
        g1, g2 = abs(0.5 - 0.35), abs(1.0 - 2.6 / 3)
        assert ece == pytest.approx(2 / 5 * g1 + 3 / 5 * g2, abs=1e-12)
        assert mce == pytest.approx(max(g1, g2), abs=1e-12)

    def test_right_closed_edges(self):
        # 0.5 belongs to the first of two bins
        ece, _ = calibration_from_pairs(np.array([0.5, 1.0]), np.array([0, 1], bool), bins=2)
        assert ece == pytest.approx(0.25)


class TestEvaluate:
    def _maps(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(1, 4, size=(6, 6))
        labels[2:4, 2:4] = 4
        labels[0, 0] = IGNORE
        score = rng.normal(size=(6, 6, 1)) + 2 * (labels == 4)[:, :, None]
        return score, LabelMap(labels, 3)

    def test_pooled_and_ignore_dropped(self):
        s, lm = self._maps()
        rep = evaluate([s, s], [lm, lm])
        assert rep.positives == 8 and rep.negatives == 2 * (36 - 4 - 1)
        keep = lm.valid_mask()
        assert rep.auroc == pytest.approx(oracles.auroc(s[:, :, 0][keep], lm.anomaly_mask()[keep]))
        assert np.isnan(rep.miou) and np.isnan(rep.ece)

    def test_tsv(self, tmp_path):
        s, lm = self._maps()
        rep = evaluate([s], [lm])
        rep.to_tsv(tmp_path / "r.tsv")
        rows = (tmp_path / "r.tsv").read_text().splitlines()
        assert rows[0] == "metric\tvalue\tcount"
        assert rows[1].startswith("auroc\t")
        rep.append_run_log(tmp_path / "runs.tsv", "a")
        rep.append_run_log(tmp_path / "runs.tsv", "b")
        log = (tmp_path / "runs.tsv").read_text().splitlines()
        assert len(log) == 3 and log[2].startswith("b\t")

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([], [])

    def test_report_fields(self):
        assert EvalReport.METRICS[:3] == ("auroc", "ap", "fpr95")
