"""Segmentation model: a frozen random-filter feature extractor and a trainable
per-pixel linear classification head.

Only the head is ever trained, first with cross-entropy on the inlier
classes and then, extended by one anomaly channel, with the PEBAL objective.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .anomalymix import MixPolicy, make_outlier_set
from .core import as_grid, softmax_map
from .losses import LossConfig, abstention_penalty, free_energy_map, pebal_objective, relative_error

log = logging.getLogger(__name__)

NONLINEARITIES = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "cos": np.cos,
}


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


# ---------------------------------------------------------------------------
# feature extractor


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    filters: np.ndarray  # (K, k, k, C)
    bias: np.ndarray  # (K,)
    mean: np.ndarray  # (K,)
    std: np.ndarray  # (K,)
    seed: int
    nonlinearity: str = "cos"

    def __post_init__(self):
        for name in ("filters", "bias", "mean", "std"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def create(cls, channels: int = 3, num_filters: int = 32, kernel_size: int = 5, seed: int = 0,
               nonlinearity: str = "cos", filter_scale: float = 3.0) -> "FeatureExtractor":
        """Random filters; standardization statistics are measured on random
        piecewise-constant calibration images drawn from the same seed."""
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        rng = np.random.default_rng([seed, 17])
        fan_in = kernel_size * kernel_size * channels
        filters = rng.normal(0.0, filter_scale / np.sqrt(fan_in), size=(num_filters, kernel_size, kernel_size, channels))
        bias = rng.normal(0.0, 1.0, size=num_filters)
        raw = cls(filters, bias, np.zeros(num_filters), np.ones(num_filters), seed, nonlinearity)
        calib = [_calibration_image(rng, channels) for _ in range(8)]
        feats = np.concatenate([raw.extract(im).reshape(-1, num_filters) for im in calib])
        std = feats.std(axis=0)
        return cls(filters, bias, feats.mean(axis=0), np.where(std > 1e-8, std, 1.0), seed, nonlinearity)

    @property
    def channels(self) -> int:
        return self.filters.shape[3]

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.filters.shape[1]

    def extract(self, image) -> np.ndarray:
        return extract_features(self, image)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.filters, self.bias, self.mean, self.std):
            h.update(arr.tobytes())
        h.update(f"{self.seed}:{self.nonlinearity}".encode())
        return h.hexdigest()


def _calibration_image(rng, channels, size=32, block=8):
    n = size // block
    colours = rng.uniform(0.0, 1.0, size=(n, n, channels))
    img = np.repeat(np.repeat(colours, block, axis=0), block, axis=1)
    return np.clip(img + rng.normal(0.0, 0.04, size=img.shape), 0.0, 1.0)


def extract_features(extractor: FeatureExtractor, image) -> np.ndarray:
    """Convolve, apply the nonlinearity and standardize; output ``(H, W, K)``."""
    image = as_grid(image)
    if image.shape[2] != extractor.channels:
        raise ValueError(f"image has {image.shape[2]} channels, extractor expects {extractor.channels}")
    k = extractor.kernel_size
    half = k // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)), mode="symmetric")
    H, W, C = image.shape
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(H * W, k * k * C)
    pre = cols @ extractor.filters.reshape(extractor.num_filters, -1).T + extractor.bias
    feats = (NONLINEARITIES[extractor.nonlinearity](pre) - extractor.mean) / extractor.std
    return feats.reshape(H, W, extractor.num_filters)


# ---------------------------------------------------------------------------
# classification head


@dataclass
class ClassificationHead:
    weights: np.ndarray  # (K, classes)
    bias: np.ndarray  # (classes,)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("head weights must be (K, classes) with a matching bias")

    @classmethod
    def init(cls, num_features: int, num_classes: int, seed: int = 0, scale: float = 0.01):
        rng = np.random.default_rng([seed, 23])
        return cls(rng.normal(0.0, scale, size=(num_features, num_classes)), np.zeros(num_classes))

    @property
    def num_features(self) -> int:
        return self.weights.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ClassificationHead":
        return ClassificationHead(self.weights.copy(), self.bias.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))


def head_forward(head: ClassificationHead, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != head.num_features:
        raise ValueError(f"features have depth {features.shape[-1]}, head expects {head.num_features}")
    return features @ head.weights + head.bias


def head_backward(features, grad_logits) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the head parameters from the gradient w.r.t. its logits."""
    features = np.asarray(features, dtype=np.float64)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if features.shape[:-1] != grad_logits.shape[:-1]:
        raise ValueError(f"spatial shapes differ: {features.shape} vs {grad_logits.shape}")
    f = features.reshape(-1, features.shape[-1])
    g = grad_logits.reshape(-1, grad_logits.shape[-1])
    return f.T @ g, g.sum(axis=0)


def extend_head(head: ClassificationHead) -> ClassificationHead:
    """Append a zero-initialized anomaly output to a ``Y``-class head."""
    k = head.num_features
    return ClassificationHead(
        np.concatenate([head.weights, np.zeros((k, 1))], axis=1),
        np.concatenate([head.bias, [0.0]]),
    )


# ---------------------------------------------------------------------------
# optimizer and training


class Adam:
    """Adaptive moment estimation with bias-corrected first and second moments."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    outlier_batch_fraction: float = 0.5

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.outlier_batch_fraction <= 1:
            raise ValueError("outlier_batch_fraction must lie in [0, 1]")


@dataclass
class EpochTrace:
    epoch: int
    pal: float
    ebm_in: float
    ebm_out: float
    reg: float
    total: float


@dataclass
class TrainResult:
    head: ClassificationHead
    trace: list
    final_loss: float = float("nan")


def _finite_logits(head, features, stage, epoch, trace):
    with np.errstate(over="ignore", invalid="ignore"):
        logits = head_forward(head, features)
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"{stage} produced non-finite logits at epoch {epoch}", trace)
    return logits


def _cross_entropy(logits, labels, valid):
    """Mean per-pixel cross-entropy over ``valid`` and its logit gradient."""
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    z = logits[valid]
    p = softmax_map(z[:, None, :])[:, 0, :]
    t = labels[valid] - 1
    rows = np.arange(count)
    loss = float(-np.log(p[rows, t]).sum() / count)
    p[rows, t] -= 1.0
    grad[valid] = p / count
    return loss, grad


def pretrain_inlier(extractor: FeatureExtractor, samples, config: TrainConfig, features=None) -> TrainResult:
    """Fit a ``Y``-class head with per-pixel cross-entropy on pure inlier scenes."""
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    y = samples[0].labels.num_inlier_classes
    if any(s.labels.anomaly_mask().any() for s in samples):
        raise ValueError("pretraining data must be pure inlier")
    feats = features if features is not None else [extract_features(extractor, s.image) for s in samples]
    head = ClassificationHead.init(extractor.num_filters, y, config.seed)
    opt = Adam([head.weights, head.bias], config.learning_rate, config.betas, config.eps)
    rng = np.random.default_rng([config.seed, 31])
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            gw = np.zeros_like(head.weights)
            gb = np.zeros_like(head.bias)
            batch_loss = 0.0
            for i in idx:
                lm = samples[i].labels
                logits = _finite_logits(head, feats[i], "pretraining", epoch, trace)
                loss, g = _cross_entropy(logits, lm.labels, lm.valid_mask())
                dw, db = head_backward(feats[i], g)
                gw += dw / len(idx)
                gb += db / len(idx)
                batch_loss += loss / len(idx)
            if not np.isfinite(batch_loss):
                raise NumericalError(f"pretraining loss diverged at epoch {epoch}", trace)
            opt.step([head.weights, head.bias], [gw, gb])
            losses.append(batch_loss)
        mean = float(np.mean(losses))
        trace.append(EpochTrace(epoch, mean, 0.0, 0.0, 0.0, mean))
        log.info("pretrain epoch %d loss %.5f", epoch, mean)
    return TrainResult(head, trace, trace[-1].total if trace else float("nan"))


def finetune_pebal(
    extractor: FeatureExtractor,
    head: ClassificationHead,
    inliers,
    outlier_objects,
    config: TrainConfig,
    policy: MixPolicy | None = None,
    features=None,
) -> TrainResult:
    """Extend ``head`` with the anomaly class and minimize the PEBAL objective.

    Each minibatch holds ``batch_size * (1 - outlier_batch_fraction)`` inlier
    scenes and the rest AnomalyMix scenes, freshly mixed every epoch from the
    training object pool. The extractor is never modified.
    """
    policy = policy or MixPolicy()
    inliers = list(inliers)
    if not inliers:
        raise ValueError("no inlier samples")
    y = inliers[0].labels.num_inlier_classes
    if head.num_outputs != y:
        raise ValueError(f"expected a {y}-class head, got {head.num_outputs} outputs")
    head = extend_head(head)
    feats = features if features is not None else [extract_features(extractor, s.image) for s in inliers]
    n_out = int(round(config.batch_size * config.outlier_batch_fraction))
    n_in = config.batch_size - n_out
    opt = Adam([head.weights, head.bias], config.learning_rate, config.betas, config.eps)
    rng = np.random.default_rng([config.seed, 37])
    per_epoch = max(1, len(inliers) // n_in) if n_in else max(1, len(inliers) // max(n_out, 1))
    trace = []
    for epoch in range(config.epochs):
        in_order = rng.permutation(len(inliers))
        base_order = rng.permutation(len(inliers))
        mixed = []
        if n_out:
            bases = [inliers[base_order[j % len(inliers)]] for j in range(per_epoch * n_out)]
            mixed = make_outlier_set(bases, outlier_objects, policy, seed=int(rng.integers(2**31))).samples
            mixed_feats = [extract_features(extractor, s.image) for s in mixed]
        sums = np.zeros(5)
        for b in range(per_epoch):
            batch = [(feats[i], inliers[i].labels, False) for i in in_order[b * n_in : (b + 1) * n_in]]
            batch += [(mixed_feats[j], mixed[j].labels, True) for j in range(b * n_out, (b + 1) * n_out)]
            gw = np.zeros_like(head.weights)
            gb = np.zeros_like(head.bias)
            terms = np.zeros(5)
            for f, lm, is_out in batch:
                logits = _finite_logits(head, f, "fine-tuning", epoch, trace)
                rep = pebal_objective(logits, lm, is_out, config.loss)
                dw, db = head_backward(f, rep.grad_logits)
                gw += dw / len(batch)
                gb += db / len(batch)
                terms += np.array([rep.pal, rep.ebm_in, rep.ebm_out, rep.reg, rep.total]) / len(batch)
            if not np.all(np.isfinite(terms)) or not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NumericalError(f"fine-tuning loss diverged at epoch {epoch}", trace)
            opt.step([head.weights, head.bias], [gw, gb])
            sums += terms
        mean = sums / per_epoch
        trace.append(EpochTrace(epoch, *map(float, mean)))
        log.info("finetune epoch %d total %.5f (pal %.4f in %.4f out %.4f reg %.5f)",
                 epoch, mean[4], mean[0], mean[1], mean[2], mean[3])
    return TrainResult(head, trace, trace[-1].total if trace else float("nan"))


def pixel_accuracy(extractor, head, samples) -> float:
    correct = total = 0
    for s in samples:
        logits = head_forward(head, extract_features(extractor, s.image))
        y = s.labels.num_inlier_classes
        pred = logits[:, :, :y].argmax(axis=-1) + 1
        m = s.labels.inlier_mask()
        correct += int((pred[m] == s.labels.labels[m]).sum())
        total += int(m.sum())
    return correct / total


# ---------------------------------------------------------------------------
# parameter-space gradient check


def head_gradient_check(loss: LossConfig, trials: int = 100, epsilon: float = 1e-5, seed: int = 0,
                        height: int = 6, width: int = 6, num_inlier_classes: int = 4,
                        num_features: int = 8, kink_margin: float = 1e-3):
    """Central differences on the head parameters of the full objective.

    Returns ``(max_relative_error, excluded)``; the abstention penalty is
    frozen at the unperturbed parameters.
    """
    from .losses import near_kink, random_instance

    rng = np.random.default_rng([seed, 41])
    worst, excluded, done = 0.0, 0, 0
    while done < trials:
        outlier = done % 2 == 1
        _, labels = random_instance(rng, height, width, num_inlier_classes, outlier)
        feats = rng.normal(size=(height, width, num_features))
        head = ClassificationHead(rng.normal(0.0, 1.0, size=(num_features, num_inlier_classes + 1)),
                                  rng.uniform(3.0, 15.0, size=num_inlier_classes + 1))
        logits = head_forward(head, feats)
        energy = free_energy_map(logits, num_inlier_classes)
        if near_kink(energy, labels, outlier, loss, kink_margin):
            excluded += 1
            continue
        penalty = loss.fixed_penalty if loss.fixed_penalty is not None else abstention_penalty(energy, loss.a_min)
        rep = pebal_objective(logits, labels, outlier, loss, penalty)
        gw, gb = head_backward(feats, rep.grad_logits)
        analytic = np.concatenate([gw.ravel(), gb])
        theta = np.concatenate([head.weights.ravel(), head.bias])
        numeric = np.zeros_like(theta)
        nw = head.weights.size

        def total(t):
            h = ClassificationHead(t[:nw].reshape(head.weights.shape), t[nw:])
            return pebal_objective(head_forward(h, feats), labels, outlier, loss, penalty).total

        for i in range(theta.size):
            old = theta[i]
            theta[i] = old + epsilon
            up = total(theta)
            theta[i] = old - epsilon
            down = total(theta)
            theta[i] = old
            numeric[i] = (up - down) / (2 * epsilon)
        worst = max(worst, relative_error(analytic, numeric))
        done += 1
    return worst, excluded


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"PEBALCK\0"
VERSION = 1
_NONLIN_IDS = {name: i for i, name in enumerate(sorted(NONLINEARITIES))}


@dataclass
class Checkpoint:
    extractor: FeatureExtractor
    head: ClassificationHead
    num_inlier_classes: int

    @property
    def has_anomaly_class(self) -> bool:
        return self.head.num_outputs == self.num_inlier_classes + 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian binary: magic, version, C, K, k, Y, outputs, seed, nonlinearity, float64 arrays."""
    ex, head = ckpt.extractor, ckpt.head
    header = MAGIC + struct.pack(
        "<IIIIIIqI",
        VERSION, ex.channels, ex.num_filters, ex.kernel_size, ckpt.num_inlier_classes,
        head.num_outputs, int(ex.seed), _NONLIN_IDS[ex.nonlinearity],
    )
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (ex.filters, ex.bias, ex.mean, ex.std, head.weights, head.bias)
    )
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, c, k_n, k, y, outputs, seed, nonlin = struct.unpack_from("<IIIIIIqI", data, off)
    if version != VERSION:
        raise ValueError(f"{path}: checkpoint version {version} not supported (expected {VERSION})")
    off += struct.calcsize("<IIIIIIqI")
    shapes = [(k_n, k, k, c), (k_n,), (k_n,), (k_n,), (k_n, outputs), (outputs,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    names = {i: name for name, i in _NONLIN_IDS.items()}
    ex = FeatureExtractor(*arrays[:4], seed=seed, nonlinearity=names[nonlin])
    return Checkpoint(ex, ClassificationHead(arrays[4], arrays[5]), y)
