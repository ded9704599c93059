import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pebal.core import IGNORE, LabelMap, free_energy_map, softmax_map
from pebal.losses import (
    CE_PENALTY,
    DEFAULT_LOSS,
    LossConfig,
    abstention_penalty,
    ebm_inlier_loss,
    ebm_outlier_loss,
    energy_reg_loss,
    finite_diff_check,
    near_kink,
    numeric_gradient,
    pal_loss,
    pebal_objective,
    random_instance,
    relative_error,
)


def one(v):
    return np.array([[[float(v)]]])


def naive_pal(logits, labels, penalty):
    """Pixel loop over the defining formula."""
    h, w, _ = logits.shape
    total, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            y = labels.labels[i, j]
            if y == IGNORE:
                continue
            z = logits[i, j]
            p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            a = penalty if np.isscalar(penalty) else penalty[i, j, 0]
            total += -math.log(p[y - 1] + p[-1] / a)
            n += 1
    return total / n


class TestPenalty:
    @pytest.mark.parametrize("e,a", [(-6, 36), (-12, 144), (0, 1.05), (0.5, 1.05)])
    def test_values(self, e, a):
        assert abstention_penalty(one(e))[0, 0, 0] == pytest.approx(a)


class TestPAL:
    def test_analytic(self):
        logits = np.zeros((1, 1, 3))
        v = pal_loss(logits, LabelMap(np.array([[1]]), 2), 2.0)
        assert v == pytest.approx(math.log(2), abs=1e-12)

    def test_large_penalty_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 4, 5))
        lab = LabelMap(rng.integers(1, 5, size=(4, 4)), 4)
        p = softmax_map(z)
        ce = -np.mean(np.log(np.take_along_axis(p, lab.labels[:, :, None] - 1, axis=-1)))
        assert pal_loss(z, lab, 1e12) == pytest.approx(ce, abs=1e-6)
        assert pal_loss(z, lab, CE_PENALTY) == pytest.approx(ce, abs=1e-12)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(3, 4, 4)) * 3
        labels = rng.integers(1, 5, size=(3, 4))
        labels[0, 0] = IGNORE
        lab = LabelMap(labels, 3)
        pen = abstention_penalty(free_energy_map(z, 3))
        assert pal_loss(z, lab, pen) == pytest.approx(naive_pal(z, lab, pen), abs=1e-12)

    def test_gradient_random_instance(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(4, 4, 5))
        lab = LabelMap(rng.integers(1, 6, size=(4, 4)), 4)
        pen = abstention_penalty(free_energy_map(z, 4))
        g = np.zeros_like(z)
        pal_loss(z, lab, pen, g)
        num = numeric_gradient(lambda x: pal_loss(x, lab, pen), z, 1e-5)
        assert relative_error(g, num) < 1e-4

    def test_penalty_must_exceed_one(self):
        with pytest.raises(ValueError):
            pal_loss(np.zeros((1, 1, 3)), LabelMap(np.array([[1]]), 2), 1.0)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000), st.floats(1.01, 1e6))
    def test_bounded_by_cross_entropy(self, seed, a):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2, 2, 4)) * 4
        lab = LabelMap(rng.integers(1, 4, size=(2, 2)), 3)
        assert pal_loss(z, lab, a) <= pal_loss(z, lab, CE_PENALTY) + 1e-12


class TestHinges:
    @pytest.mark.parametrize("e,v", [(-12, 0), (-10, 4), (-20, 0)])
    def test_inlier(self, e, v):
        assert ebm_inlier_loss(one(e), np.ones((1, 1), bool), -12) == v

    @pytest.mark.parametrize("e,v", [(-6, 0), (-8, 4), (-3, 0)])
    def test_outlier(self, e, v):
        assert ebm_outlier_loss(one(e), np.ones((1, 1), bool), -6) == v

    def test_empty_mask(self):
        assert ebm_inlier_loss(one(5), np.zeros((1, 1), bool), -12) == 0.0

    @given(st.floats(-40, 40), st.floats(-40, 40))
    def test_nonnegative(self, e, m):
        mask = np.ones((1, 1), bool)
        assert ebm_inlier_loss(one(e), mask, m) >= 0
        assert ebm_outlier_loss(one(e), mask, m) >= 0


class TestRegularizer:
    def test_constant(self):
        v = energy_reg_loss(np.full((2, 2, 1), -3.0), 0.5, 0.25)
        assert v == pytest.approx(0.25 * 4 * 3)

    def test_hand_enumerated(self):
        e = np.array([[0.0, 1.0], [0.0, 1.0]])[:, :, None]
        # horizontal pairs differ by 1 (two of them), vertical pairs equal
        assert energy_reg_loss(e, 0.5, 0.25) == pytest.approx(0.5 * 2 + 0.25 * 2)

    def test_single_pixel(self):
        assert energy_reg_loss(one(-5), 0.5, 0.25) == pytest.approx(0.25 * 5)

    def test_gradient(self):
        e = np.random.default_rng(3).normal(size=(4, 5, 1))
        g = np.zeros_like(e)
        energy_reg_loss(e, 0.3, 0.2, g)
        num = numeric_gradient(lambda x: energy_reg_loss(x, 0.3, 0.2), e, 1e-6)
        assert relative_error(g, num) < 1e-6


class TestObjective:
    def test_degenerate_is_cross_entropy(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 3, 5))
        lab = LabelMap(rng.integers(1, 5, size=(3, 3)), 4)
        cfg = LossConfig(lam=0.0, beta1=0.0, beta2=0.0, fixed_penalty=CE_PENALTY)
        p = softmax_map(z)
        ce = -np.mean(np.log(np.take_along_axis(p, lab.labels[:, :, None] - 1, axis=-1)))
        assert pebal_objective(z, lab, False, cfg).total == pytest.approx(ce, abs=1e-12)

    def test_all_ignore(self):
        z = np.random.default_rng(5).normal(size=(3, 3, 5))
        lab = LabelMap(np.full((3, 3), IGNORE), 4)
        rep = pebal_objective(z, lab, True, LossConfig(beta1=0.0, beta2=0.0))
        assert rep.total == 0.0
        assert not rep.grad_logits.any()

    def test_inlier_image_with_anomaly_rejected(self):
        lab = LabelMap(np.array([[1, 5]]), 4)
        with pytest.raises(ValueError):
            pebal_objective(np.zeros((1, 2, 5)), lab, False, DEFAULT_LOSS)

    def test_components_sum(self):
        z, lab = random_instance(np.random.default_rng(6), 6, 6, 4, True)
        r = pebal_objective(z, lab, True, DEFAULT_LOSS)
        assert r.total == pytest.approx(r.pal + DEFAULT_LOSS.lam * (r.ebm_in + r.ebm_out) + r.reg)

    @pytest.mark.parametrize("outlier", [False, True])
    def test_gradient_outlier_instance(self, outlier):
        z, lab = random_instance(np.random.default_rng(7), 6, 6, 4, outlier)
        r = pebal_objective(z, lab, outlier, DEFAULT_LOSS)
        pen = abstention_penalty(free_energy_map(z, 4), DEFAULT_LOSS.a_min)
        num = numeric_gradient(lambda x: pebal_objective(x, lab, outlier, DEFAULT_LOSS, pen).total, z, 1e-5)
        assert relative_error(r.grad_logits, num) < 1e-4

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_abstention_shift_leaves_energy_terms(self, seed, c):
        z, lab = random_instance(np.random.default_rng(seed), 3, 3, 4, True)
        shifted = z.copy()
        shifted[:, :, 4] += c
        a = pebal_objective(z, lab, True, DEFAULT_LOSS)
        b = pebal_objective(shifted, lab, True, DEFAULT_LOSS)
        assert (a.ebm_in, a.ebm_out, a.reg) == (b.ebm_in, b.ebm_out, b.reg)


class TestGradCheck:
    def test_zero_gradient_case(self):
        assert relative_error(np.zeros(4), np.zeros(4)) == 0.0

    def test_small_run(self):
        res = finite_diff_check(DEFAULT_LOSS, trials=10, seed=3)
        assert res.trials == 10
        assert res.max_relative_error < 1e-4

    @pytest.mark.parametrize("cfg", [
        LossConfig(fixed_penalty=4.0),
        LossConfig(ebm_all_pixels=True),
        LossConfig(use_ebm=False),
        LossConfig(fixed_penalty=CE_PENALTY, use_ebm=False, beta1=0.0, beta2=0.0),
    ])
    def test_ablation_variants(self, cfg):
        assert finite_diff_check(cfg, trials=6, seed=1).max_relative_error < 1e-4

    def test_kink_instance_detected(self):
        # every inlier pixel sits exactly on the inlier margin
        lab = LabelMap(np.ones((2, 2), int), 4)
        z = np.zeros((2, 2, 5))
        z[:, :, :4] = 12.0 - math.log(4)
        e = free_energy_map(z, 4)
        assert abs(e[0, 0, 0] + 12.0) < 1e-12
        assert near_kink(e, lab, False, DEFAULT_LOSS, 1e-3)
        assert not near_kink(e - 1.0, lab, False, LossConfig(beta1=0.0, beta2=0.0), 1e-3)

    def test_exclusions_reported(self):
        res = finite_diff_check(DEFAULT_LOSS, trials=20, seed=0)
        assert res.trials == 20 and res.excluded >= 0

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            finite_diff_check(DEFAULT_LOSS, trials=1, epsilon=1.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(m_in=-5, m_out=-6), dict(lam=-1), dict(a_min=1.0), dict(beta1=-1), dict(fixed_penalty=0.5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)

    def test_defaults(self):
        c = LossConfig()
        assert (c.m_in, c.m_out, c.lam, c.beta1, c.beta2) == (-12, -6, 0.1, 5e-4, 3e-6)
