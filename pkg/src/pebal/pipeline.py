"""End-to-end runs shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .config import RunConfig
from .core import inlier_softmax
from .inference import BASELINES, score_from_logits, segment_from, write_score_map
from .losses import LossConfig
from .metrics import EvalReport, ScoredPixels, evaluate, threshold_at_tpr
from .model import (
    Checkpoint,
    FeatureExtractor,
    TrainResult,
    extract_features,
    finetune_pebal,
    head_forward,
    pretrain_inlier,
)
from .scenegen import generate_benchmark, load_objects_for, load_split, read_manifest

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "pal", "ebm_in", "ebm_out", "reg", "total")


@contextmanager
def output_lock(target):
    """Exclusive lock file next to (or inside) ``target``; fails if already held."""
    target = Path(target)
    lock = target / ".lock" if target.is_dir() else target.with_name(target.name + ".lock")
    if not lock.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {lock.parent}")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{target} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in trace:
            w.writerow([t.epoch, *(repr(float(getattr(t, c))) for c in TRACE_COLUMNS[1:])])


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: RunConfig, out_dir):
    return generate_benchmark(
        cfg.scene_spec(), cfg.sizes(), seed=cfg.seed, out_dir=out_dir,
        pure_every=cfg.data_pure_every, pool_size=cfg.data_pool_size,
    )


def make_extractor(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor.create(
        channels=3, num_filters=cfg.model_num_filters, kernel_size=cfg.model_kernel_size,
        seed=cfg.seed, nonlinearity=cfg.model_nonlinearity, filter_scale=cfg.model_filter_scale,
    )


def pretrain(cfg: RunConfig, data_dir, extractor=None, train=None, features=None) -> tuple[Checkpoint, TrainResult]:
    y = cfg.scene_num_inlier_classes
    extractor = extractor or make_extractor(cfg)
    samples = [e.sample for e in (train or load_split(data_dir, "train", y))]
    result = pretrain_inlier(extractor, samples, cfg.pretrain_config(), features=features)
    return Checkpoint(extractor, result.head, y), result


def finetune(cfg: RunConfig, data_dir, ckpt: Checkpoint, loss: LossConfig | None = None,
             train=None, objects=None, features=None) -> tuple[Checkpoint, TrainResult]:
    if ckpt.has_anomaly_class:
        raise ValueError("fine-tuning expects a pretrained checkpoint without the anomaly class")
    y = ckpt.num_inlier_classes
    samples = [e.sample for e in (train or load_split(data_dir, "train", y))]
    objects = objects or load_objects_for(data_dir, "train")
    result = finetune_pebal(ckpt.extractor, ckpt.head, samples, objects, cfg.train_config(loss),
                            cfg.mix_policy(), features=features)
    return Checkpoint(ckpt.extractor, result.head, y), result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ScoredSplit:
    entries: list
    logits: list
    scores: list


def score_split(ckpt: Checkpoint, entries, baseline: str = "pebal", smoothing=(7, 1.0), features=None) -> ScoredSplit:
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}; choose from {', '.join(BASELINES)}")
    y = ckpt.num_inlier_classes
    logits, scores = [], []
    for i, e in enumerate(entries):
        f = features[i] if features is not None else extract_features(ckpt.extractor, e.sample.image)
        z = head_forward(ckpt.head, f)
        logits.append(z)
        scores.append(score_from_logits(z, y, baseline, smoothing))
    return ScoredSplit(list(entries), logits, scores)


def operating_threshold(scored: ScoredSplit, tpr_target: float = 0.95) -> float:
    sp = ScoredPixels.from_maps(scored.scores, [e.sample.labels for e in scored.entries])
    return threshold_at_tpr(sp, tpr_target)


def report_for(scored: ScoredSplit, num_inlier_classes: int, bins: int = 15) -> EvalReport:
    """Ranking metrics pooled over every image; mIoU and ECE/MCE from the
    inlier argmax and inlier softmax on the anomaly-free images."""
    y = num_inlier_classes
    pure = [i for i, e in enumerate(scored.entries) if not e.sample.labels.anomaly_mask().any()]
    if not pure:
        pure = list(range(len(scored.entries)))
    gts = [scored.entries[i].sample.labels for i in pure]
    preds = [scored.logits[i][:, :, :y].argmax(axis=-1) + 1 for i in pure]
    probs = [inlier_softmax(scored.logits[i], y) for i in pure]
    return evaluate(
        scored.scores, [e.sample.labels for e in scored.entries],
        pred_maps=preds, inlier_probs=probs, miou_labels=gts, bins=bins,
    )


def run_id(ckpt_path, split: str, baseline: str, seed: int) -> str:
    h = hashlib.sha256(Path(ckpt_path).read_bytes())
    h.update(f"{split}:{baseline}:{seed}".encode())
    return h.hexdigest()[:16]


def evaluate_to_dir(cfg: RunConfig, ckpt: Checkpoint, data_dir, split: str, out_dir, baseline: str,
                    tau: float | None = None, run: str | None = None) -> tuple[EvalReport, float]:
    """Score a split, write score maps, segmentations and the report TSV."""
    y = ckpt.num_inlier_classes
    entries = load_split(data_dir, split, y)
    scored = score_split(ckpt, entries, baseline, cfg.smoothing)
    if tau is None:
        val = scored if split == "val" else score_split(ckpt, load_split(data_dir, "val", y), baseline, cfg.smoothing)
        tau = operating_threshold(val, cfg.eval_tpr_target)
    report = report_for(scored, y, cfg.eval_bins)
    out = Path(out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    for e, z, s in zip(scored.entries, scored.logits, scored.scores):
        write_score_map(out / "scores" / f"{e.sample_id}.pgm", s)
        netpbm.write_labels(out / "pred" / f"{e.sample_id}.pgm", segment_from(z, s, y, tau).labels)
    report.to_tsv(out / "report.tsv")
    (out / "threshold.tsv").write_text(f"baseline\ttau\ttpr_target\n{baseline}\t{tau!r}\t{cfg.eval_tpr_target!r}\n")
    if run is not None:
        report.append_run_log(out / "runs.tsv", run)
    return report, tau


# ---------------------------------------------------------------------------
# ablation


ABLATION_LEGS = (
    ("ce_ood", "cross-entropy with an extra anomaly class on AnomalyMix data"),
    ("fixed_al", "abstention loss with a constant penalty"),
    ("fixed_al_ebm", "constant-penalty abstention plus energy hinges"),
    ("pal_ebm", "energy-biased penalty plus energy hinges (no regularizer)"),
    ("full", "energy-biased penalty, energy hinges and smoothness/sparsity regularizer"),
)


def ablation_losses(cfg: RunConfig) -> dict:
    base = cfg.loss()
    a = cfg.ablate_fixed_penalty
    return {
        "ce_ood": base.with_(fixed_penalty=math.inf, use_ebm=False, beta1=0.0, beta2=0.0),
        "fixed_al": base.with_(fixed_penalty=a, use_ebm=False, beta1=0.0, beta2=0.0),
        "fixed_al_ebm": base.with_(fixed_penalty=a, beta1=0.0, beta2=0.0),
        "pal_ebm": base.with_(beta1=0.0, beta2=0.0),
        "full": base,
    }


@dataclass
class AblationRow:
    leg: str
    seed: int
    auroc: float
    ap: float
    fpr95: float
    status: str = "ok"


def run_ablation(cfg: RunConfig, data_dir) -> list[AblationRow]:
    """Train every ladder leg for ``cfg.ablate_seeds`` seeds; score with the smoothed energy."""
    y = cfg.scene_num_inlier_classes
    train = load_split(data_dir, "train", y)
    test = load_split(data_dir, "test", y)
    objects = load_objects_for(data_dir, "train")
    legs = ablation_losses(cfg)
    rows = []
    for k in range(cfg.ablate_seeds):
        seed_cfg = cfg.with_seed(cfg.seed + k)
        extractor = make_extractor(seed_cfg)
        feats = [extract_features(extractor, e.sample.image) for e in train]
        test_feats = [extract_features(extractor, e.sample.image) for e in test]
        try:
            pre, _ = pretrain(seed_cfg, data_dir, extractor, train, feats)
        except Exception as exc:  # noqa: BLE001 - a failed seed marks its rows
            log.error("ablation seed %d pretraining failed: %s", seed_cfg.seed, exc)
            rows += [AblationRow(name, seed_cfg.seed, *(3 * [float("nan")]), f"failed: {exc}") for name in legs]
            continue
        for name, loss in legs.items():
            try:
                ck, _ = finetune(seed_cfg, data_dir, pre, loss, train, objects, feats)
                rep = evaluate(score_split(ck, test, "pebal", cfg.smoothing, test_feats).scores,
                               [e.sample.labels for e in test])
                rows.append(AblationRow(name, seed_cfg.seed, rep.auroc, rep.ap, rep.fpr95))
            except Exception as exc:  # noqa: BLE001
                log.error("ablation leg %s seed %d failed: %s", name, seed_cfg.seed, exc)
                rows.append(AblationRow(name, seed_cfg.seed, *(3 * [float("nan")]), f"failed: {exc}"))
            log.info("ablation seed %d leg %s: %s", seed_cfg.seed, name, rows[-1])
    return rows


def summarize_ablation(rows) -> list[dict]:
    out = []
    for name, desc in ABLATION_LEGS:
        mine = [r for r in rows if r.leg == name]
        ok = [r for r in mine if r.status == "ok"]
        entry = {"config": name, "description": desc, "seeds": len(ok)}
        for metric in ("auroc", "ap", "fpr95"):
            vals = np.array([getattr(r, metric) for r in ok]) * 100.0
            entry[f"{metric}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            entry[f"{metric}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        entry["status"] = "ok" if len(ok) == len(mine) and ok else "failed"
        out.append(entry)
    return out


def write_ablation(out_dir, cfg: RunConfig, rows) -> list[dict]:
    out = Path(out_dir)
    summary = summarize_ablation(rows)
    cols = ["config", "description", "seeds", "auroc_mean", "auroc_sd", "ap_mean", "ap_sd",
            "fpr95_mean", "fpr95_sd", "status"]
    with open(out / "ablation.tsv", "w", newline="") as f:
        f.write(f"# fixed_penalty={cfg.ablate_fixed_penalty!r}\tseeds={cfg.ablate_seeds}\tscore=smoothed_energy\n")
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for e in summary:
            w.writerow([e[c] if not isinstance(e[c], float) else f"{e[c]:.4f}" for c in cols])
    with open(out / "ablation_runs.tsv", "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["config", "seed", "auroc", "ap", "fpr95", "status"])
        for r in rows:
            w.writerow([r.leg, r.seed, repr(r.auroc), repr(r.ap), repr(r.fpr95), r.status])
    return summary


def manifest_summary(data_dir) -> str:
    rows = read_manifest(data_dir)
    counts = {}
    for r in rows:
        n, a = counts.get(r["split"], (0, 0))
        counts[r["split"]] = (n + 1, a + (int(r["anomaly_pixels"]) > 0))
    return "\n".join(f"{split}\t{n} samples\t{a} with anomalies" for split, (n, a) in counts.items())
