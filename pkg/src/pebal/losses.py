"""The PEBAL training objective and its analytic gradients.

Every loss here takes an optional ``grad_out`` accumulator. For the PAL term
it is the gradient w.r.t. the logits; for the energy terms (EBM hinges and
the regulariser) it is the gradient w.r.t. the energy map, which
:func:`energy_grad_to_logits` then chains into the inlier logit channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    IGNORE,
    LabelMap,
    PixelGrid,
    as_grid,
    free_energy_map,
    inlier_softmax,
    softmax_map,
)


@dataclass(frozen=True)
class LossConfig:
    m_in: float = -12.0
    m_out: float = -6.0
    lam: float = 0.1
    beta1: float = 5e-4
    beta2: float = 3e-6
    a_min: float = 1.05
    # constant abstention penalty instead of the energy-derived one; inf gives plain CE
    fixed_penalty: float | None = None
    use_ebm: bool = True
    # apply the outlier hinge to every pixel of an outlier image (literal reading)
    ebm_all_pixels: bool = False

    def __post_init__(self):
        if not self.m_in < self.m_out:
            raise ValueError(f"m_in ({self.m_in}) must be below m_out ({self.m_out})")
        if self.lam < 0 or self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.a_min > 1:
            raise ValueError(f"a_min must exceed 1, got {self.a_min}")
        if self.fixed_penalty is not None and not self.fixed_penalty > 1:
            raise ValueError(f"fixed_penalty must exceed 1, got {self.fixed_penalty}")

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)


@dataclass
class LossReport:
    pal: float
    ebm_in: float
    ebm_out: float
    reg: float
    total: float
    grad_logits: PixelGrid


def abstention_penalty(energy: PixelGrid, a_min: float = 1.05) -> PixelGrid:
    """Per-pixel abstention cost ``max(E**2, a_min)``."""
    energy = as_grid(energy, depth=1)
    return np.maximum(energy * energy, a_min)


def pal_loss(logits: PixelGrid, labels: LabelMap, penalty, grad_out=None) -> float:
    """Pixel-wise abstention loss, mean over non-ignored pixels.

    Per pixel this is ``-log(p[y] + p[Y+1] / a)`` with ``p`` the softmax over
    all ``Y + 1`` channels. ``penalty`` is either a depth-1 grid or a scalar and
    is treated as a constant when differentiating.
    """
    logits = as_grid(logits, depth=labels.num_inlier_classes + 1)
    penalty = np.broadcast_to(np.asarray(penalty, dtype=np.float64), logits.shape[:2] + (1,))
    if np.any(penalty <= 1):
        raise ValueError("abstention penalty must exceed 1 everywhere")
    valid = labels.valid_mask()
    count = int(valid.sum())
    if count == 0:
        return 0.0
    p = softmax_map(logits)[valid]
    target = labels.labels[valid] - 1
    rows = np.arange(count)
    inv_a = 1.0 / penalty[valid][:, 0]
    # coefficient vector c with q = c . p
    coef = np.zeros_like(p)
    coef[rows, target] = 1.0
    coef[:, -1] += inv_a
    q = (coef * p).sum(axis=1)
    loss = float(-np.log(q).sum() / count)
    if grad_out is not None:
        g = p - coef * p / q[:, None]
        grad_out[valid] += g / count
    return loss


def ebm_inlier_loss(energy: PixelGrid, mask: np.ndarray, m_in: float, grad_out=None) -> float:
    """Mean of ``max(0, E - m_in)**2`` over ``mask``; ``grad_out`` is w.r.t. energy."""
    return _hinge_sq(as_grid(energy, depth=1), mask, m_in, +1.0, grad_out)


def ebm_outlier_loss(energy: PixelGrid, mask: np.ndarray, m_out: float, grad_out=None) -> float:
    """Mean of ``max(0, m_out - E)**2`` over ``mask``; ``grad_out`` is w.r.t. energy."""
    return _hinge_sq(as_grid(energy, depth=1), mask, m_out, -1.0, grad_out)


def _hinge_sq(energy, mask, margin, sign, grad_out):
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    h = np.maximum(0.0, sign * (energy[mask][:, 0] - margin))
    if grad_out is not None:
        grad_out[mask, 0] += sign * 2.0 * h / count
    return float((h * h).sum() / count)


def energy_reg_loss(energy: PixelGrid, beta1: float, beta2: float, grad_out=None) -> float:
    """Total-variation smoothness plus L1 sparsity on the energy map (summed).

    Each horizontal and vertical neighbour pair is counted once. The
    subgradient of ``|0|`` is taken as 0.
    """
    e = as_grid(energy, depth=1)[:, :, 0]
    dx = e[:, :-1] - e[:, 1:]
    dy = e[:-1, :] - e[1:, :]
    loss = beta1 * (np.abs(dx).sum() + np.abs(dy).sum()) + beta2 * np.abs(e).sum()
    if grad_out is not None:
        g = beta2 * np.sign(e)
        sx = beta1 * np.sign(dx)
        sy = beta1 * np.sign(dy)
        g[:, :-1] += sx
        g[:, 1:] -= sx
        g[:-1, :] += sy
        g[1:, :] -= sy
        grad_out[:, :, 0] += g
    return float(loss)


def energy_grad_to_logits(logits: PixelGrid, num_inlier_classes: int, grad_energy, grad_out) -> None:
    """Chain dL/dE into dL/dlogits; dE/dz_y = -softmax_inlier(z)_y for y <= Y."""
    w = inlier_softmax(logits, num_inlier_classes)
    grad_out[:, :, :num_inlier_classes] -= grad_energy * w


def pebal_objective(
    logits: PixelGrid,
    labels: LabelMap,
    is_outlier_image: bool,
    config: LossConfig,
    penalty=None,
) -> LossReport:
    """Per-image PEBAL loss ``pal + lam * (ebm_in + ebm_out) + reg`` with its gradient.

    ``penalty`` overrides the abstention penalty; by default it comes from the
    current energy map (or ``config.fixed_penalty``) and is held constant.
    """
    y = labels.num_inlier_classes
    logits = as_grid(logits, depth=y + 1)
    anomaly = labels.anomaly_mask()
    if not is_outlier_image and np.any(anomaly):
        raise ValueError("inlier image contains anomaly-class labels")
    energy = free_energy_map(logits, y)
    if penalty is None:
        if config.fixed_penalty is not None:
            penalty = config.fixed_penalty
        else:
            penalty = abstention_penalty(energy, config.a_min)

    grad = np.zeros_like(logits)
    grad_e = np.zeros_like(energy)
    pal = pal_loss(logits, labels, penalty, grad)

    ebm_in = ebm_out = 0.0
    if config.use_ebm and config.lam > 0:
        g_in = np.zeros_like(energy)
        g_out = np.zeros_like(energy)
        if config.ebm_all_pixels:
            valid = labels.valid_mask()
            if is_outlier_image:
                ebm_out = ebm_outlier_loss(energy, valid, config.m_out, g_out)
            else:
                ebm_in = ebm_inlier_loss(energy, valid, config.m_in, g_in)
        else:
            ebm_in = ebm_inlier_loss(energy, labels.inlier_mask(), config.m_in, g_in)
            ebm_out = ebm_outlier_loss(energy, anomaly, config.m_out, g_out)
        grad_e += config.lam * (g_in + g_out)

    reg = 0.0
    if config.beta1 > 0 or config.beta2 > 0:
        n = energy.shape[0] * energy.shape[1]
        g_reg = np.zeros_like(energy)
        reg = energy_reg_loss(energy, config.beta1, config.beta2, g_reg) / n
        grad_e += g_reg / n

    energy_grad_to_logits(logits, y, grad_e, grad)
    total = pal + config.lam * (ebm_in + ebm_out) + reg
    return LossReport(pal=pal, ebm_in=ebm_in, ebm_out=ebm_out, reg=reg, total=total, grad_logits=grad)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_relative_error: float
    trials: int
    excluded: int
    worst_trial: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``; 0 when both vanish."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def near_kink(energy: np.ndarray, labels: LabelMap, is_outlier: bool, config: LossConfig, margin: float) -> bool:
    """True if any term is within ``margin`` of a hinge or absolute-value kink."""
    e = energy[:, :, 0]
    if config.use_ebm and config.lam > 0:
        if config.ebm_all_pixels:
            valid = labels.valid_mask()
            m = config.m_out if is_outlier else config.m_in
            if np.any(np.abs(e[valid] - m) < margin):
                return True
        else:
            if np.any(np.abs(e[labels.inlier_mask()] - config.m_in) < margin):
                return True
            if np.any(np.abs(e[labels.anomaly_mask()] - config.m_out) < margin):
                return True
    if config.beta1 > 0:
        if np.any(np.abs(np.diff(e, axis=0)) < margin) or np.any(np.abs(np.diff(e, axis=1)) < margin):
            return True
    if config.beta2 > 0 and np.any(np.abs(e) < margin):
        return True
    return False


def random_instance(rng: np.random.Generator, height: int, width: int, num_inlier_classes: int, outlier: bool):
    """Random logits and labels whose energies straddle the default margins."""
    y = num_inlier_classes
    labels = rng.integers(1, y + 1, size=(height, width))
    if outlier:
        labels[rng.random((height, width)) < 0.3] = y + 1
    labels[rng.random((height, width)) < 0.1] = IGNORE
    level = rng.uniform(3.0, 17.0, size=(height, width, 1))
    logits = level + rng.normal(0.0, 2.0, size=(height, width, y + 1))
    return logits, LabelMap(labels, y)


def finite_diff_check(
    config: LossConfig,
    trials: int = 100,
    epsilon: float = 1e-5,
    seed: int = 0,
    height: int = 6,
    width: int = 6,
    num_inlier_classes: int = 4,
    kink_margin: float = 1e-3,
    labels: LabelMap | None = None,
) -> GradCheckResult:
    """Compare analytic logit gradients against central differences.

    The abstention penalty is frozen at the unperturbed point on both sides,
    matching how the analytic gradient treats it. Instances within
    ``kink_margin`` of a non-differentiable point are redrawn and counted in
    ``excluded``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    rng = np.random.default_rng(seed)
    if labels is not None:
        (height, width), num_inlier_classes = labels.shape, labels.num_inlier_classes
    worst, worst_trial, excluded, done = 0.0, -1, 0, 0
    while done < trials:
        outlier = done % 2 == 1
        logits, lab = random_instance(rng, height, width, num_inlier_classes, outlier)
        if labels is not None:
            lab = labels
            outlier = bool(np.any(lab.anomaly_mask()))
        energy = free_energy_map(logits, lab.num_inlier_classes)
        if near_kink(energy, lab, outlier, config, kink_margin):
            excluded += 1
            if labels is not None and excluded > 1000:
                raise RuntimeError("could not draw a kink-free instance for the given labels")
            continue
        penalty = (
            config.fixed_penalty
            if config.fixed_penalty is not None
            else abstention_penalty(energy, config.a_min)
        )
        report = pebal_objective(logits, lab, outlier, config, penalty)

        def f(z):
            return pebal_objective(z, lab, outlier, config, penalty).total

        numeric = numeric_gradient(f, logits, epsilon)
        err = relative_error(report.grad_logits, numeric)
        if err > worst:
            worst, worst_trial = err, done
        done += 1
    return GradCheckResult(worst, trials, excluded, worst_trial)


def numeric_gradient(f, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        up = f(x)
        flat[i] = old - epsilon
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * epsilon)
    return grad


DEFAULT_LOSS = LossConfig()
CE_PENALTY = math.inf
