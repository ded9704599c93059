import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pebal.core import free_energy_map
from pebal.inference import (
    BASELINES,
    anomaly_score_map,
    read_score_map,
    score_from_logits,
    segment,
    segment_from,
    write_score_map,
)
from pebal.model import ClassificationHead, FeatureExtractor


def logits(seed=0, shape=(6, 6, 5)):
    return np.random.default_rng(seed).normal(size=shape) * 3


def test_kernel_one_is_raw_energy():
    z = logits()
    assert np.array_equal(score_from_logits(z, 4, "pebal", (1, 1.0)), free_energy_map(z, 4))
    assert np.array_equal(score_from_logits(z, 4, "energy"), free_energy_map(z, 4))


@given(st.floats(0.01, 20))
def test_raising_inlier_logits_lowers_scores(c):
    z = logits(1)
    up = z.copy()
    up[:, :, :4] += c
    assert np.all(score_from_logits(up, 4) < score_from_logits(z, 4))


@settings(max_examples=25)
@given(st.integers(0, 1000), st.floats(-1e3, 1e3))
def test_abstention_shift_invariance(seed, c):
    z = logits(seed)
    s = z.copy()
    s[:, :, 4] += c
    for b in BASELINES:
        assert np.array_equal(score_from_logits(z, 4, b), score_from_logits(s, 4, b))


def test_baseline_values():
    z = np.zeros((1, 1, 5))
    z[0, 0, 0] = np.log(3.0)
    assert score_from_logits(z, 4, "msp")[0, 0, 0] == pytest.approx(0.5)
    assert score_from_logits(z, 4, "maxlogit")[0, 0, 0] == pytest.approx(-np.log(3.0))
    p = np.array([0.5, 1 / 6, 1 / 6, 1 / 6])
    assert score_from_logits(z, 4, "entropy")[0, 0, 0] == pytest.approx(-(p * np.log(p)).sum())


def test_unknown_baseline():
    with pytest.raises(ValueError):
        score_from_logits(logits(), 4, "oracle")


class TestSegment:
    def test_infinite_threshold(self):
        z = logits(2)
        lm = segment_from(z, score_from_logits(z, 4), 4, np.inf)
        assert np.array_equal(lm.labels, z[:, :, :4].argmax(-1) + 1)

    def test_negative_infinite_threshold(self):
        z = logits(3)
        assert (segment_from(z, score_from_logits(z, 4), 4, -np.inf).labels == 5).all()

    def test_end_to_end(self):
        ex = FeatureExtractor.create(num_filters=4, kernel_size=3)
        head = ClassificationHead.init(4, 5, 0, scale=1.0)
        img = np.random.default_rng(0).random((8, 8, 3))
        s = anomaly_score_map(ex, head, img, 4)
        lm = segment(ex, head, img, 4, float(np.median(s)))
        assert (lm.labels == 5).sum() == (s[:, :, 0] > np.median(s)).sum()

    def test_non_finite_head(self):
        ex = FeatureExtractor.create(num_filters=4, kernel_size=3)
        head = ClassificationHead(np.full((4, 5), np.nan), np.zeros(5))
        with pytest.raises(ValueError):
            anomaly_score_map(ex, head, np.zeros((4, 4, 3)), 4)


def test_score_map_round_trip(tmp_path):
    s = logits(4, (5, 7, 1))
    lo, hi = write_score_map(tmp_path / "s.pgm", s)
    back = read_score_map(tmp_path / "s.pgm")
    assert (lo, hi) == (s.min(), s.max())
    assert np.abs(back - s).max() <= (hi - lo) / 255 / 2 + 1e-12


def test_constant_score_map(tmp_path):
    write_score_map(tmp_path / "c.pgm", np.full((2, 2, 1), 3.0))
    assert np.array_equal(read_score_map(tmp_path / "c.pgm"), np.full((2, 2, 1), 3.0))
