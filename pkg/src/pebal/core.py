"""Grid containers and shared numerical primitives.

A pixel grid is a float64 numpy array of shape ``(H, W, D)`` in row-major
(row, col, channel) order. Label maps carry 1-based class ids: ``1..Y`` are
the inlier classes, ``Y + 1`` the anomaly (abstention) class and
:data:`IGNORE` marks pixels that take part in nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

IGNORE = 255

PixelGrid = np.ndarray


def as_grid(values, depth: int | None = None) -> PixelGrid:
    """Return ``values`` as a contiguous float64 ``(H, W, D)`` grid.

    2-D input is promoted to depth 1.
    """
    grid = np.ascontiguousarray(values, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise ValueError(f"pixel grid must be 2-D or 3-D, got shape {grid.shape}")
    if min(grid.shape) < 1:
        raise ValueError(f"pixel grid must be non-empty, got shape {grid.shape}")
    if depth is not None and grid.shape[2] != depth:
        raise ValueError(f"expected depth {depth}, got {grid.shape[2]}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("pixel grid contains non-finite values")
    return grid


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    num_inlier_classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if self.num_inlier_classes < 2:
            raise ValueError("need at least 2 inlier classes")
        valid = labels != IGNORE
        bad = valid & ((labels < 1) | (labels > self.num_inlier_classes + 1))
        if np.any(bad):
            raise ValueError(
                f"labels must lie in 1..{self.num_inlier_classes + 1} or be {IGNORE}"
            )
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def anomaly_label(self) -> int:
        return self.num_inlier_classes + 1

    def inlier_mask(self) -> np.ndarray:
        return (self.labels >= 1) & (self.labels <= self.num_inlier_classes)

    def anomaly_mask(self) -> np.ndarray:
        return self.labels == self.anomaly_label

    def valid_mask(self) -> np.ndarray:
        return self.labels != IGNORE


@dataclass(frozen=True)
class LabeledSample:
    image: PixelGrid
    labels: LabelMap

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and labels {self.labels.shape} differ in size"
            )


def logsumexp(values: Sequence[float]) -> float:
    """Numerically stable ``log(sum(exp(values)))``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    m = v.max()
    if v.size == 1:
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def logsumexp_channels(grid: np.ndarray) -> np.ndarray:
    """Per-pixel logsumexp over the last axis, returns shape ``(H, W)``."""
    m = grid.max(axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.exp(grid - m).sum(axis=-1))


def softmax_map(logits: PixelGrid) -> PixelGrid:
    logits = as_grid(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def free_energy_map(logits: PixelGrid, num_inlier_classes: int) -> PixelGrid:
    """Inlier free energy per pixel: minus logsumexp over the first ``Y`` channels.

    The abstention channel, if present, is excluded.
    """
    logits = as_grid(logits)
    if not 1 <= num_inlier_classes <= logits.shape[2]:
        raise ValueError(
            f"num_inlier_classes={num_inlier_classes} out of range for depth {logits.shape[2]}"
        )
    return -logsumexp_channels(logits[:, :, :num_inlier_classes])[:, :, None]


def inlier_softmax(logits: PixelGrid, num_inlier_classes: int) -> PixelGrid:
    """Softmax restricted to the inlier channels (the weights of d(-E)/d logits)."""
    return softmax_map(as_grid(logits)[:, :, :num_inlier_classes])


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_smooth(grid: PixelGrid, kernel_size: int = 7, sigma: float = 1.0) -> PixelGrid:
    """Separable normalized Gaussian blur of a depth-1 map.

    Borders use edge-including reflection (``d c b a | a b c d``).
    """
    grid = as_grid(grid, depth=1)
    w = gaussian_kernel1d(kernel_size, sigma)
    if kernel_size == 1:
        return grid.copy()
    half = kernel_size // 2
    plane = grid[:, :, 0]
    h, wd = plane.shape
    padded = _symmetric_pad(plane, half)
    rows = np.zeros((padded.shape[0], wd))
    for j, wj in enumerate(w):
        rows += wj * padded[:, j : j + wd]
    out = np.zeros((h, wd))
    for i, wi in enumerate(w):
        out += wi * rows[i : i + h, :]
    return out[:, :, None]


def _symmetric_pad(plane: np.ndarray, pad: int) -> np.ndarray:
    # np.pad 'symmetric' cannot pad beyond the array extent in one go
    out = plane
    remaining = pad
    while remaining > 0:
        step = min(remaining, out.shape[0], out.shape[1])
        out = np.pad(out, step, mode="symmetric")
        remaining -= step
    return out
