"""Cut-and-paste outlier synthesis.

Objects are cut from an outlier source with their masks and pasted into
inlier samples, where the pasted pixels are relabelled as the anomaly class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .core import LabelMap, LabeledSample, as_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutlierObject:
    patch: np.ndarray
    mask: np.ndarray
    shape_id: str

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or not mask.any():
            raise ValueError("object mask must be a non-empty 2-D boolean grid")
        if self.patch.shape[:2] != mask.shape:
            raise ValueError("patch and mask sizes differ")
        if not (mask[0].any() and mask[-1].any() and mask[:, 0].any() and mask[:, -1].any()):
            raise ValueError("object mask is not tight")
        object.__setattr__(self, "mask", mask)

    @property
    def bbox(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def family(self) -> str:
        return self.shape_id.split("-", 1)[0]


@dataclass(frozen=True)
class MixPolicy:
    scale_range: tuple[float, float] = (0.5, 2.0)
    allow_hflip: bool = True
    max_paste_attempts: int = 20
    paste_per_image: tuple[int, int] = (1, 3)
    mix_probability: float = 1.0
    max_anomaly_fraction: float = 0.25

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if not 0 <= self.mix_probability <= 1:
            raise ValueError("mix_probability must lie in [0, 1]")
        a, b = self.paste_per_image
        if not 0 <= a <= b:
            raise ValueError(f"invalid paste_per_image {self.paste_per_image}")
        if not 0 < self.max_anomaly_fraction <= 1:
            raise ValueError("max_anomaly_fraction must lie in (0, 1]")
        if self.max_paste_attempts < 1:
            raise ValueError("max_paste_attempts must be >= 1")


@dataclass(frozen=True)
class Placement:
    sample: int
    shape_id: str
    row: int
    col: int
    scale: float
    hflip: bool
    pixels: int


@dataclass
class MixResult:
    samples: list
    placements: list = field(default_factory=list)
    skipped: int = 0


def cut_object(image, mask, shape_id: str = "obj") -> OutlierObject:
    """Crop ``image`` and ``mask`` to the tight bounding box of the mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot cut an object from an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    image = as_grid(image)
    return OutlierObject(image[r0:r1, c0:c1].copy(), mask[r0:r1, c0:c1].copy(), shape_id)


def transform(obj: OutlierObject, scale: float, hflip: bool):
    """Nearest-neighbour rescale (and optional mirror) of patch and mask."""
    h, w = obj.mask.shape
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    ri = np.minimum((np.arange(nh) + 0.5) * h / nh, h - 1).astype(np.int64)
    ci = np.minimum((np.arange(nw) + 0.5) * w / nw, w - 1).astype(np.int64)
    if hflip:
        ci = ci[::-1]
    return obj.patch[np.ix_(ri, ci)], obj.mask[np.ix_(ri, ci)]


def paste(sample: LabeledSample, obj: OutlierObject, location, scale: float = 1.0, hflip: bool = False) -> LabeledSample:
    """Paste ``obj`` with its top-left corner at ``location``; masked pixels become class Y+1."""
    patch, mask = transform(obj, scale, hflip)
    return _paste_transformed(sample, patch, mask, location)


def _paste_transformed(sample, patch, mask, location):
    r, c = location
    h, w = mask.shape
    H, W = sample.labels.shape
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise ValueError(f"object of size {h}x{w} at {location} does not fit a {H}x{W} image")
    if patch.shape[2] != sample.image.shape[2]:
        raise ValueError("patch and image channel counts differ")
    image = sample.image.copy()
    labels = sample.labels.labels.copy()
    region = image[r : r + h, c : c + w]
    region[mask] = patch[mask]
    labels[r : r + h, c : c + w][mask] = sample.labels.anomaly_label
    return LabeledSample(image, LabelMap(labels, sample.labels.num_inlier_classes))


def mix_sample(sample: LabeledSample, objects, policy: MixPolicy, rng: np.random.Generator, index: int = 0):
    """Paste a random number of objects into one sample.

    Returns the mixed sample, its placements and the number of skipped objects.
    A placement is accepted only if it fits, does not overlap earlier pastes
    and keeps the anomaly fraction within ``policy.max_anomaly_fraction``.
    """
    H, W = sample.labels.shape
    budget = int(np.floor(policy.max_anomaly_fraction * H * W))
    lo, hi = policy.paste_per_image
    n = int(rng.integers(lo, hi + 1))
    placements, skipped = [], 0
    anomaly = sample.labels.anomaly_mask().copy()
    used = int(anomaly.sum())
    for _ in range(n):
        obj = objects[int(rng.integers(len(objects)))]
        scale = float(rng.uniform(*policy.scale_range))
        hflip = bool(policy.allow_hflip and rng.random() < 0.5)
        placed = False
        for _ in range(policy.max_paste_attempts):
            patch, mask = transform(obj, scale, hflip)
            h, w = mask.shape
            area = int(mask.sum())
            if h > H or w > W or used + area > budget:
                scale *= 0.8
                continue
            r = int(rng.integers(0, H - h + 1))
            c = int(rng.integers(0, W - w + 1))
            if np.any(anomaly[r : r + h, c : c + w] & mask):
                continue
            sample = _paste_transformed(sample, patch, mask, (r, c))
            anomaly[r : r + h, c : c + w] |= mask
            used += area
            placements.append(Placement(index, obj.shape_id, r, c, scale, hflip, area))
            placed = True
            break
        if not placed:
            skipped += 1
    return sample, placements, skipped


def make_outlier_set(inliers, objects, policy: MixPolicy, seed: int) -> MixResult:
    """Mix outlier objects into each inlier sample with probability ``policy.mix_probability``.

    Sample ``i`` draws from its own generator seeded by ``(seed, i)`` so the
    result does not depend on processing order.
    """
    objects = list(objects)
    if not objects:
        raise ValueError("object pool is empty")
    result = MixResult(samples=[])
    for i, sample in enumerate(inliers):
        rng = np.random.default_rng([seed, i])
        if rng.random() >= policy.mix_probability:
            result.samples.append(sample)
            continue
        mixed, placements, skipped = mix_sample(sample, objects, policy, rng, i)
        result.samples.append(mixed)
        result.placements.extend(placements)
        result.skipped += skipped
    if result.skipped:
        log.warning("anomalymix: %d objects skipped (no valid placement)", result.skipped)
    return result


# ---------------------------------------------------------------------------
# on-disk object pools


def save_objects(directory, objects) -> None:
    """Write ``<shape_id>.ppm`` patches with ``<shape_id>.pgm`` masks (0/255)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for obj in objects:
        netpbm.write_image(directory / f"{obj.shape_id}.ppm", obj.patch)
        netpbm.write(directory / f"{obj.shape_id}.pgm", obj.mask.astype(np.uint8) * 255)


def load_objects(directory) -> list[OutlierObject]:
    directory = Path(directory)
    out = []
    for ppm in sorted(directory.glob("*.ppm")):
        pgm = ppm.with_suffix(".pgm")
        if not pgm.exists():
            raise FileNotFoundError(f"mask missing for {ppm}: expected {pgm}")
        out.append(OutlierObject(netpbm.read_image(ppm), netpbm.read(pgm) > 127, ppm.stem))
    if not out:
        raise FileNotFoundError(f"no objects found in {directory}")
    return out


def write_outlier_set(directory, result: MixResult, seed: int) -> None:
    """Write mixed samples as PPM/PGM pairs plus a placement manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(result.samples):
        netpbm.write_image(directory / "images" / f"mix_{i:04d}.ppm", s.image)
        netpbm.write_labels(directory / "labels" / f"mix_{i:04d}.pgm", s.labels.labels)
    with open(directory / "placements.tsv", "w") as f:
        f.write(f"# seed={seed}\tskipped={result.skipped}\n")
        f.write("sample\tshape_id\trow\tcol\tscale\thflip\tpixels\n")
        for p in result.placements:
            f.write(f"{p.sample}\t{p.shape_id}\t{p.row}\t{p.col}\t{p.scale!r}\t{int(p.hflip)}\t{p.pixels}\n")


__all__ = [
    "MixPolicy",
    "MixResult",
    "OutlierObject",
    "Placement",
    "cut_object",
    "load_objects",
    "make_outlier_set",
    "paste",
    "save_objects",
    "write_outlier_set",
]
