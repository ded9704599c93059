import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pebal.anomalymix import (
    MixPolicy,
    OutlierObject,
    cut_object,
    load_objects,
    make_outlier_set,
    paste,
    save_objects,
    transform,
    write_outlier_set,
)
from pebal.core import LabelMap, LabeledSample
from pebal.scenegen import generate_object_pool


def blank(h=16, w=16, y=3, seed=0):
    rng = np.random.default_rng(seed)
    img = np.round(rng.random((h, w, 3)) * 255) / 255
    return LabeledSample(img, LabelMap(rng.integers(1, y + 1, size=(h, w)), y))


def square(k=3, colour=0.5):
    return OutlierObject(np.full((k, k, 3), colour), np.ones((k, k), bool), "X-sq-0")


class TestCut:
    def test_full_mask(self):
        img = np.random.default_rng(0).random((4, 5, 3))
        obj = cut_object(img, np.ones((4, 5), bool))
        assert np.array_equal(obj.patch, img)

    def test_single_pixel(self):
        img = np.random.default_rng(0).random((4, 5, 3))
        m = np.zeros((4, 5), bool)
        m[2, 3] = True
        obj = cut_object(img, m)
        assert obj.bbox == (1, 1) and np.array_equal(obj.patch[0, 0], img[2, 3])

    def test_l_shape(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 3] = True
        m[5, 3:7] = True
        obj = cut_object(np.zeros((8, 8, 3)), m)
        assert obj.bbox == (4, 4)
        assert obj.mask.sum() == m.sum()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cut_object(np.zeros((3, 3, 3)), np.zeros((3, 3), bool))

    def test_loose_mask_rejected(self):
        m = np.zeros((3, 3), bool)
        m[1, 1] = True
        with pytest.raises(ValueError):
            OutlierObject(np.zeros((3, 3, 3)), m, "x")


class TestPaste:
    def test_count_matches_mask(self):
        m = np.zeros((5, 5), bool)
        m[0, :] = m[:, 0] = True
        obj = cut_object(np.ones((5, 5, 3)), m)
        out = paste(blank(), obj, (3, 4), scale=2.0)
        _, tm = transform(obj, 2.0, False)
        assert out.labels.anomaly_mask().sum() == tm.sum()

    def test_verbatim(self):
        obj = OutlierObject(np.random.default_rng(1).random((3, 4, 3)), np.ones((3, 4), bool), "x")
        out = paste(blank(), obj, (2, 5))
        assert np.array_equal(out.image[2:5, 5:9], obj.patch)
        assert (out.labels.labels[2:5, 5:9] == 4).all()

    def test_two_disjoint_objects_add(self):
        s = paste(paste(blank(), square(3), (0, 0)), square(2), (10, 10))
        assert s.labels.anomaly_mask().sum() == 9 + 4

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            paste(blank(), square(4), (14, 0))

    def test_input_untouched(self):
        b = blank()
        before = b.image.copy()
        paste(b, square(3), (1, 1))
        assert np.array_equal(b.image, before)

    @given(st.floats(0.2, 3.0), st.booleans())
    def test_transform_shapes_agree(self, scale, flip):
        obj = generate_object_pool("train", 1, 0)[0]
        patch, mask = transform(obj, scale, flip)
        assert patch.shape[:2] == mask.shape and mask.any()


class TestMix:
    objects = generate_object_pool("train", 8, 3)

    def test_probability_zero(self):
        ins = [blank(seed=i) for i in range(4)]
        res = make_outlier_set(ins, self.objects, MixPolicy(mix_probability=0.0), seed=0)
        assert all(a is b for a, b in zip(res.samples, ins))
        assert not res.placements

    def test_deterministic(self):
        ins = [blank(32, 32, seed=i) for i in range(5)]
        a = make_outlier_set(ins, self.objects, MixPolicy(), seed=9)
        b = make_outlier_set(ins, self.objects, MixPolicy(), seed=9)
        assert a.placements == b.placements
        for x, y in zip(a.samples, b.samples):
            assert np.array_equal(x.image, y.image) and np.array_equal(x.labels.labels, y.labels.labels)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.02, 0.4))
    def test_fraction_bounded(self, seed, frac):
        ins = [blank(24, 24, seed=i) for i in range(3)]
        res = make_outlier_set(ins, self.objects, MixPolicy(max_anomaly_fraction=frac, paste_per_image=(1, 4)), seed)
        for s in res.samples:
            assert s.labels.anomaly_mask().mean() <= frac

    def test_placements_match_pixels(self):
        ins = [blank(32, 32, seed=i) for i in range(6)]
        res = make_outlier_set(ins, self.objects, MixPolicy(), seed=1)
        for i, s in enumerate(res.samples):
            placed = sum(p.pixels for p in res.placements if p.sample == i)
            assert s.labels.anomaly_mask().sum() == placed

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            make_outlier_set([blank()], [], MixPolicy(), 0)

    @pytest.mark.parametrize("kw", [dict(scale_range=(2, 1)), dict(mix_probability=1.5), dict(max_anomaly_fraction=0)])
    def test_bad_policy(self, kw):
        with pytest.raises(ValueError):
            MixPolicy(**kw)


def test_object_round_trip(tmp_path):
    objs = generate_object_pool("test", 4, 1)
    save_objects(tmp_path, objs)
    objs = sorted(objs, key=lambda o: o.shape_id)
    back = load_objects(tmp_path)
    assert [o.shape_id for o in back] == [o.shape_id for o in objs]
    for a, b in zip(objs, back):
        assert np.array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.patch, b.patch, atol=0.5 / 255)


def test_write_outlier_set(tmp_path):
    res = make_outlier_set([blank(32, 32)], generate_object_pool("train", 3, 0), MixPolicy(), 2)
    write_outlier_set(tmp_path, res, 2)
    assert (tmp_path / "placements.tsv").read_text().count("\n") == len(res.placements) + 2
