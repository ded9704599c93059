"""Test-time anomaly scoring and segmentation."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import netpbm
from .core import LabelMap, free_energy_map, gaussian_smooth, softmax_map
from .model import ClassificationHead, FeatureExtractor, extract_features, head_forward

DEFAULT_SMOOTHING = (7, 1.0)

BASELINES = ("msp", "maxlogit", "entropy", "energy", "pebal")


def _logits(extractor, head, image, features=None):
    if not head.is_finite():
        raise ValueError("head parameters are not finite")
    feats = features if features is not None else extract_features(extractor, image)
    return head_forward(head, feats)


def anomaly_score_map(extractor: FeatureExtractor, head: ClassificationHead, image, num_inlier_classes: int,
                      smoothing=DEFAULT_SMOOTHING, features=None) -> np.ndarray:
    """Gaussian-smoothed inlier free energy; higher means more anomalous."""
    logits = _logits(extractor, head, image, features)
    return gaussian_smooth(free_energy_map(logits, num_inlier_classes), *smoothing)


def score_from_logits(logits, num_inlier_classes: int, baseline: str = "pebal", smoothing=DEFAULT_SMOOTHING):
    """Per-pixel anomaly score under one of :data:`BASELINES`.

    The probability-based rules use the softmax over the inlier channels only.
    """
    y = num_inlier_classes
    if baseline == "pebal":
        return gaussian_smooth(free_energy_map(logits, y), *smoothing)
    if baseline == "energy":
        return free_energy_map(logits, y)
    inl = logits[:, :, :y]
    if baseline == "maxlogit":
        return -inl.max(axis=-1, keepdims=True)
    p = softmax_map(inl)
    if baseline == "msp":
        return 1.0 - p.max(axis=-1, keepdims=True)
    if baseline == "entropy":
        return -(p * np.log(p)).sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown baseline {baseline!r}; choose from {', '.join(BASELINES)}")


def segment_from(logits, score, num_inlier_classes: int, tau: float) -> LabelMap:
    """Anomaly label where ``score > tau``, otherwise the inlier argmax (lowest index on ties)."""
    y = num_inlier_classes
    labels = logits[:, :, :y].argmax(axis=-1) + 1
    labels[score[:, :, 0] > tau] = y + 1
    return LabelMap(labels, y)


def segment(extractor, head, image, num_inlier_classes: int, tau: float,
            smoothing=DEFAULT_SMOOTHING, features=None) -> LabelMap:
    logits = _logits(extractor, head, image, features)
    score = gaussian_smooth(free_energy_map(logits, num_inlier_classes), *smoothing)
    return segment_from(logits, score, num_inlier_classes, tau)


def write_score_map(path, score) -> tuple[float, float]:
    """Affinely rescale to 0..255, write PGM and a ``.range`` sidecar with (min, max)."""
    s = np.asarray(score)[:, :, 0] if np.ndim(score) == 3 else np.asarray(score)
    lo, hi = float(s.min()), float(s.max())
    scaled = np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)
    netpbm.write(path, np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8))
    Path(str(path) + ".range").write_text(f"min\t{lo!r}\nmax\t{hi!r}\n")
    return lo, hi


def read_score_map(path) -> np.ndarray:
    """Inverse of :func:`write_score_map` up to 8-bit quantization."""
    raw = netpbm.read(path).astype(np.float64) / 255.0
    rng = dict(line.split("\t") for line in Path(str(path) + ".range").read_text().splitlines())
    lo, hi = float(rng["min"]), float(rng["max"])
    return (lo + raw * (hi - lo))[:, :, None]
