"""Pixel-level anomaly detection and segmentation metrics.

Ranking metrics treat anomalies as the positive class and predict positive
when ``score >= threshold``; pixels sharing a score form a single threshold
group.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import IGNORE, LabelMap


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredPixels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels, dtype=bool).ravel()
        if scores.shape != labels.shape:
            raise ValueError("scores and labels must have equal length")
        if scores.size == 0:
            raise ValueError("no scored pixels")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_maps(cls, score_maps, label_maps) -> "ScoredPixels":
        """Pool per-image score maps against ground truth, dropping IGNORE pixels."""
        scores, labels = [], []
        for s, lm in zip(score_maps, label_maps):
            s = np.asarray(s)
            s = s[:, :, 0] if s.ndim == 3 else s
            keep = lm.valid_mask()
            scores.append(s[keep])
            labels.append(lm.anomaly_mask()[keep])
        return cls(np.concatenate(scores), np.concatenate(labels))

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _require_both(sp: ScoredPixels, name: str):
    if sp.positives == 0 or sp.negatives == 0:
        raise UndefinedMetricError(f"{name} needs at least one positive and one negative")


def _threshold_groups(sp: ScoredPixels):
    """Cumulative TP/FP counts at each distinct score, descending."""
    # stable sort by (score desc, original index)
    order = np.lexsort((np.arange(sp.scores.size), -sp.scores))
    s = sp.scores[order]
    y = sp.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[s[1:] != s[:-1], True]
    return s[last], tp[last], fp[last]


def roc_curve(sp: ScoredPixels):
    """Return (fpr, tpr, thresholds), starting from the (0, 0) point."""
    _require_both(sp, "ROC")
    thr, tp, fp = _threshold_groups(sp)
    tpr = np.r_[0.0, tp / sp.positives]
    fpr = np.r_[0.0, fp / sp.negatives]
    return fpr, tpr, np.r_[np.inf, thr]


def auroc(sp: ScoredPixels) -> float:
    """Area under the ROC step curve; equals the Mann-Whitney U statistic with ties at 0.5."""
    fpr, tpr, _ = roc_curve(sp)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(sp: ScoredPixels) -> float:
    if sp.positives == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    _, tp, fp = _threshold_groups(sp)
    precision = tp / (tp + fp)
    recall = tp / sp.positives
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_tpr(sp: ScoredPixels, tpr_target: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR reaches ``tpr_target``."""
    return float(_operating_point(sp, tpr_target)[1])


def threshold_at_tpr(sp: ScoredPixels, tpr_target: float = 0.95) -> float:
    """Highest score threshold whose TPR reaches ``tpr_target``."""
    return float(_operating_point(sp, tpr_target)[0])


def _operating_point(sp, tpr_target):
    _require_both(sp, "FPR@TPR")
    thr, tp, fp = _threshold_groups(sp)
    tpr = tp / sp.positives
    # guard float round-off in e.g. 19/20 >= 0.95
    idx = int(np.argmax(tpr >= tpr_target - 1e-12))
    return thr[idx], fp[idx] / sp.negatives


def miou(pred: LabelMap | np.ndarray, gt: LabelMap, num_classes: int | None = None) -> float:
    """Mean IoU over inlier classes present in ``gt``.

    Ground-truth pixels labelled IGNORE or anomaly are excluded; predicted
    anomaly labels on inlier pixels count as misses.
    """
    return miou_from_confusion(confusion(pred, gt, num_classes))


def confusion(pred, gt: LabelMap, num_classes: int | None = None) -> np.ndarray:
    """Counts ``[gt_class, pred_label]`` over valid inlier pixels.

    Columns ``0..Y-1`` are inlier predictions and column ``Y`` collects any
    other prediction.
    """
    y = num_classes or gt.num_inlier_classes
    p = pred.labels if isinstance(pred, LabelMap) else np.asarray(pred)
    if p.shape != gt.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {gt.shape} differ in shape")
    keep = (gt.labels >= 1) & (gt.labels <= y)
    g = gt.labels[keep] - 1
    q = p[keep] - 1
    q = np.where((q >= 0) & (q < y), q, y)
    return np.bincount(g * (y + 1) + q, minlength=y * (y + 1)).reshape(y, y + 1)


def miou_from_confusion(conf: np.ndarray) -> float:
    y = conf.shape[0]
    if conf.sum() == 0:
        raise UndefinedMetricError("no valid inlier pixels for mIoU")
    tp = np.diag(conf[:, :y]).astype(np.float64)
    gt_count = conf.sum(axis=1)
    pred_count = conf[:, :y].sum(axis=0)
    present = gt_count > 0
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    return float(iou.mean())


def calibration(probs: np.ndarray, gt: LabelMap | np.ndarray, bins: int = 15) -> tuple[float, float]:
    """Expected and maximum calibration error over equal-width confidence bins.

    ``probs`` is ``(H, W, Y)`` (or ``(N, Y)``); only pixels whose ground truth
    is an inlier class are scored. Bins are right-closed, ``(k/B, (k+1)/B]``,
    with confidence 0 falling in the first bin.
    """
    conf, correct = calibration_pairs(probs, gt)
    return calibration_from_pairs(conf, correct, bins)


def calibration_pairs(probs, gt):
    probs = np.asarray(probs, dtype=np.float64)
    y = probs.shape[-1]
    g = gt.labels if isinstance(gt, LabelMap) else np.asarray(gt)
    p = probs.reshape(-1, y)
    g = g.reshape(-1)
    keep = (g >= 1) & (g <= y)
    p, g = p[keep], g[keep] - 1
    return p.max(axis=1), p.argmax(axis=1) == g


def calibration_from_pairs(conf, correct, bins: int = 15) -> tuple[float, float]:
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise UndefinedMetricError("no pixels for calibration")
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    acc = np.bincount(idx, weights=correct, minlength=bins)
    cf = np.bincount(idx, weights=conf, minlength=bins)
    used = count > 0
    gap = np.abs(acc[used] - cf[used]) / count[used]
    ece = float(np.sum(count[used] / conf.size * gap))
    return ece, float(gap.max())


@dataclass
class EvalReport:
    auroc: float
    ap: float
    fpr95: float
    miou: float
    ece: float
    mce: float
    positives: int
    negatives: int

    METRICS = ("auroc", "ap", "fpr95", "miou", "ece", "mce")

    def rows(self):
        counts = {
            "auroc": self.positives + self.negatives,
            "ap": self.positives + self.negatives,
            "fpr95": self.positives + self.negatives,
        }
        for name in self.METRICS:
            yield name, getattr(self, name), counts.get(name, "")

    def to_tsv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["metric", "value", "count"])
            for name, value, count in self.rows():
                w.writerow([name, format_float(value), count])
            w.writerow(["positives", self.positives, ""])
            w.writerow(["negatives", self.negatives, ""])

    def append_run_log(self, path, run_id: str) -> None:
        names = [f.name for f in fields(self)]
        new = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            if new:
                w.writerow(["run_id", *names])
            row = asdict(self)
            w.writerow([run_id, *(format_float(row[n]) for n in names)])


def format_float(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def evaluate(
    score_maps,
    label_maps,
    pred_maps=None,
    inlier_probs=None,
    miou_labels=None,
    bins: int = 15,
) -> EvalReport:
    """Pooled evaluation over a split.

    ``score_maps``/``label_maps`` feed the ranking metrics. ``pred_maps`` are
    the predicted label maps scored for mIoU against ``miou_labels`` (default
    ``label_maps``); ``inlier_probs`` are the inlier softmax grids for ECE/MCE.
    """
    score_maps, label_maps = list(score_maps), list(label_maps)
    if not score_maps:
        raise ValueError("empty split")
    sp = ScoredPixels.from_maps(score_maps, label_maps)
    gts = list(miou_labels) if miou_labels is not None else label_maps
    m = ece = mce = float("nan")
    if pred_maps is not None:
        conf = sum(confusion(p, g) for p, g in zip(pred_maps, gts))
        m = miou_from_confusion(conf)
    if inlier_probs is not None:
        pairs = [calibration_pairs(p, g) for p, g in zip(inlier_probs, gts)]
        ece, mce = calibration_from_pairs(
            np.concatenate([c for c, _ in pairs]), np.concatenate([k for _, k in pairs]), bins
        )
    return EvalReport(
        auroc=auroc(sp),
        ap=average_precision(sp),
        fpr95=fpr_at_tpr(sp, 0.95),
        miou=m,
        ece=ece,
        mce=mce,
        positives=sp.positives,
        negatives=sp.negatives,
    )


__all__ = [
    "IGNORE",
    "EvalReport",
    "ScoredPixels",
    "UndefinedMetricError",
    "auroc",
    "average_precision",
    "calibration",
    "evaluate",
    "fpr_at_tpr",
    "miou",
    "roc_curve",
    "threshold_at_tpr",
]
