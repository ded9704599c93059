"""Procedural driving-scene benchmark.

Scenes are layered: a sky band, a band of vertical structure, then the
ground with a road trapezoid narrowing towards the horizon and a shoulder on
either side. Each region is its palette colour plus Gaussian noise.

Training outlier objects (family ``A``: ellipses, rectangles and unions of
them) and test anomalies (family ``B``: crosses, rings, blobs) are drawn from
disjoint shape families and disjoint colour palettes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .anomalymix import OutlierObject, cut_object, load_objects, paste, save_objects
from .core import LabelMap, LabeledSample

SKY, STRUCTURE, ROAD, SHOULDER = 1, 2, 3, 4

DEFAULT_PALETTE = (
    (0.55, 0.70, 0.90),  # sky
    (0.40, 0.52, 0.33),  # structure
    (0.34, 0.34, 0.38),  # road
    (0.66, 0.58, 0.46),  # shoulder
)

# outlier colours; each is >= 0.3 away from every inlier colour
TRAIN_PALETTE = (
    (0.88, 0.14, 0.12),
    (0.96, 0.56, 0.08),
    (0.82, 0.16, 0.74),
    (0.95, 0.95, 0.95),
)
TEST_PALETTE = (
    (0.94, 0.90, 0.12),
    (0.08, 0.80, 0.82),
    (0.46, 0.10, 0.88),
    (0.98, 0.50, 0.64),
)

TRAIN_SHAPES = ("ellipse", "rect", "union")
TEST_SHAPES = ("cross", "ring", "blob")


@dataclass(frozen=True)
class Layout:
    horizon: tuple[float, float] = (0.20, 0.35)
    structure: tuple[float, float] = (0.15, 0.25)
    road_top: tuple[float, float] = (0.05, 0.12)
    road_bottom: tuple[float, float] = (0.25, 0.40)
    road_offset: tuple[float, float] = (-0.08, 0.08)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_inlier_classes: int = 4
    noise_sigma: float = 0.04
    palette: tuple = DEFAULT_PALETTE
    layout: Layout = field(default_factory=Layout)

    def __post_init__(self):
        if self.num_inlier_classes < 3:
            raise ValueError("scenes need at least 3 inlier classes")
        if len(self.palette) != self.num_inlier_classes:
            raise ValueError(
                f"palette has {len(self.palette)} colours for {self.num_inlier_classes} classes"
            )
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        pal = np.asarray(self.palette, dtype=np.float64)
        d = np.linalg.norm(pal[:, None] - pal[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() < 3 * self.noise_sigma:
            raise ValueError(
                f"palette colours closer than 3*noise_sigma ({d.min():.3f} < {3 * self.noise_sigma:.3f})"
            )


def draw_layout(spec: SceneSpec, rng: np.random.Generator) -> dict:
    lay = spec.layout
    return {
        "horizon": rng.uniform(*lay.horizon) * spec.height,
        "structure": rng.uniform(*lay.structure) * spec.height,
        "road_top": rng.uniform(*lay.road_top) * spec.width,
        "road_bottom": rng.uniform(*lay.road_bottom) * spec.width,
        "road_offset": rng.uniform(*lay.road_offset) * spec.width,
    }


def rasterize(spec: SceneSpec, params: dict) -> np.ndarray:
    """Label map for one set of layout parameters, sampled at pixel centres."""
    H, W = spec.height, spec.width
    rc = np.arange(H)[:, None] + 0.5
    cc = np.arange(W)[None, :] + 0.5
    horizon = params["horizon"]
    ground = horizon + params["structure"]
    labels = np.full((H, W), SHOULDER if spec.num_inlier_classes >= 4 else STRUCTURE, dtype=np.int64)
    t = np.clip((rc - ground) / max(H - ground, 1e-9), 0.0, 1.0)
    half = params["road_top"] + t * (params["road_bottom"] - params["road_top"])
    centre = W / 2 + params["road_offset"]
    road = (rc >= ground) & (np.abs(cc - centre) < half)
    labels[road] = ROAD
    labels[np.broadcast_to(rc < ground, (H, W))] = STRUCTURE
    labels[np.broadcast_to(rc < horizon, (H, W))] = SKY
    return labels


def expected_fractions(spec: SceneSpec) -> np.ndarray:
    """Continuous-geometry class fractions averaged over the layout distribution.

    All layout parameters are independent uniforms, so the expectation
    factorizes into parameter means.
    """
    lay = spec.layout
    mean = lambda r: 0.5 * (r[0] + r[1])  # noqa: E731
    sky = mean(lay.horizon)
    structure = mean(lay.structure)
    ground = 1.0 - sky - structure
    road = ground * (mean(lay.road_top) + mean(lay.road_bottom))
    out = np.zeros(spec.num_inlier_classes)
    out[SKY - 1] = sky
    out[STRUCTURE - 1] = structure
    out[ROAD - 1] = road
    if spec.num_inlier_classes >= 4:
        out[SHOULDER - 1] = ground - road
    else:
        out[STRUCTURE - 1] += ground - road
    return out


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory scenes equal their on-disk copies."""
    return np.clip(np.rint(image * 255.0), 0, 255) / 255.0


def generate_scene(spec: SceneSpec, seed) -> LabeledSample:
    if spec.num_inlier_classes > 4:
        raise ValueError(f"the layered layout places at most 4 classes, got {spec.num_inlier_classes}")
    rng = np.random.default_rng(seed)
    labels = rasterize(spec, draw_layout(spec, rng))
    frac = np.bincount(labels.ravel(), minlength=spec.num_inlier_classes + 1)[1:] / labels.size
    if np.any(frac < 0.02):
        raise ValueError(f"layout leaves a class under 2% of pixels: {np.round(frac, 3)}")
    pal = np.asarray(spec.palette, dtype=np.float64)
    image = pal[labels - 1]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return LabeledSample(quantize(image), LabelMap(labels, spec.num_inlier_classes))


# ---------------------------------------------------------------------------
# outlier objects


def _shape_mask(shape: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    r = (np.arange(h)[:, None] + 0.5 - h / 2) / (h / 2)
    c = (np.arange(w)[None, :] + 0.5 - w / 2) / (w / 2)
    if shape == "ellipse":
        return r * r + c * c <= 1.0
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    if shape == "union":
        cut = rng.uniform(-0.3, 0.3)
        lower = (r > cut) & (np.abs(c) <= 0.8)
        return ((r + 0.3) ** 2 + c * c <= 0.7) | lower
    if shape == "cross":
        t = rng.uniform(0.25, 0.45)
        return (np.abs(r) <= t) | (np.abs(c) <= t)
    if shape == "ring":
        d = r * r + c * c
        return (d <= 1.0) & (d >= rng.uniform(0.2, 0.45))
    if shape == "blob":
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(3, 6))):
            cr, cc = rng.uniform(-0.5, 0.5, size=2)
            rad = rng.uniform(0.3, 0.6)
            mask |= (r - cr) ** 2 + (c - cc) ** 2 <= rad * rad
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def generate_object_pool(kind: str, n: int, seed, noise_sigma: float = 0.04, size_range=(6, 14)) -> list[OutlierObject]:
    """Outlier objects for training (``kind='train'``) or testing (``'test'``)."""
    if kind not in ("train", "test"):
        raise ValueError(f"kind must be 'train' or 'test', got {kind!r}")
    if n < 1:
        raise ValueError("pool size must be >= 1")
    family, shapes, palette = (
        ("A", TRAIN_SHAPES, TRAIN_PALETTE) if kind == "train" else ("B", TEST_SHAPES, TEST_PALETTE)
    )
    rng = np.random.default_rng([_seed_int(seed), 0 if kind == "train" else 1])
    pool = []
    for i in range(n):
        shape = shapes[i % len(shapes)]
        h, w = (int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
        mask = _shape_mask(shape, h, w, rng)
        colour = np.asarray(palette[int(rng.integers(len(palette)))]) + rng.normal(0, 0.03, size=3)
        patch = colour + rng.normal(0.0, noise_sigma, size=(h, w, 3))
        patch = quantize(np.clip(patch, 0.0, 1.0))
        pool.append(cut_object(patch, mask, f"{family}-{shape}-{i:04d}"))
    return pool


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFF


def derive_seed(seed, *keys: int) -> int:
    return int(np.random.SeedSequence([_seed_int(seed), *keys]).generate_state(1)[0])


def paste_on_road(sample: LabeledSample, obj: OutlierObject, rng: np.random.Generator, road_prob: float = 0.9):
    """Paste ``obj`` (scale 1) centred on a road pixel with probability ``road_prob``."""
    H, W = sample.labels.shape
    h, w = obj.bbox
    scale = 1.0
    if h > H or w > W:
        scale = min(H / h, W / w)
        h, w = max(1, int(h * scale)), max(1, int(w * scale))
    road = np.argwhere(sample.labels.labels == ROAD)
    if len(road) and rng.random() < road_prob:
        cr, cc = road[int(rng.integers(len(road)))]
        r = int(np.clip(cr - h // 2, 0, H - h))
        c = int(np.clip(cc - w // 2, 0, W - w))
    else:
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
    return paste(sample, obj, (r, c), scale=scale, hflip=False)


# ---------------------------------------------------------------------------
# benchmark bundle

SPLITS = ("train", "val", "test")
DEFAULT_SIZES = {"train": 64, "val": 16, "test": 32}


@dataclass
class Entry:
    sample_id: str
    split: str
    seed: int
    sample: LabeledSample
    pure: bool

    @property
    def anomaly_pixels(self) -> int:
        return int(self.sample.labels.anomaly_mask().sum())


@dataclass
class Benchmark:
    spec: SceneSpec
    entries: list
    train_objects: list
    test_objects: list

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]


def generate_benchmark(
    spec: SceneSpec,
    sizes=None,
    seed: int = 0,
    out_dir=None,
    pure_every: int = 4,
    objects_per_scene=(1, 2),
    pool_size: int = 32,
) -> Benchmark:
    """Train split of pure inlier scenes; val/test splits with pasted family-B objects.

    Every ``pure_every``-th val/test scene stays anomaly-free for inlier
    segmentation scoring.
    """
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for k in SPLITS:
        if sizes.get(k, 0) < 1:
            raise ValueError(f"split size for {k!r} must be >= 1")
    train_objects = generate_object_pool("train", pool_size, derive_seed(seed, 101), spec.noise_sigma)
    test_objects = generate_object_pool("test", pool_size, derive_seed(seed, 102), spec.noise_sigma)
    entries = []
    for si, split in enumerate(SPLITS):
        for i in range(sizes[split]):
            s = derive_seed(seed, si, i)
            sample = generate_scene(spec, s)
            pure = split == "train" or i % pure_every == pure_every - 1
            if not pure:
                rng = np.random.default_rng([s, 7])
                for _ in range(int(rng.integers(objects_per_scene[0], objects_per_scene[1] + 1))):
                    obj = test_objects[int(rng.integers(len(test_objects)))]
                    sample = paste_on_road(sample, obj, rng)
            entries.append(Entry(f"{split}_{i:04d}", split, s, sample, pure))
    bench = Benchmark(spec, entries, train_objects, test_objects)
    if out_dir is not None:
        write_benchmark(bench, out_dir)
    return bench


def write_benchmark(bench: Benchmark, out_dir) -> None:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        for e in bench.entries:
            netpbm.write_image(out / "images" / f"{e.sample_id}.ppm", e.sample.image)
            netpbm.write_labels(out / "labels" / f"{e.sample_id}.pgm", e.sample.labels.labels)
        save_objects(out / "objects" / "train", bench.train_objects)
        save_objects(out / "objects" / "test", bench.test_objects)
        with open(out / "manifest.tsv", "w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["sample_id", "split", "seed", "anomaly_pixels"])
            for e in bench.entries:
                w.writerow([e.sample_id, e.split, e.seed, e.anomaly_pixels])
    except OSError as exc:
        raise OSError(f"writing benchmark to {out}: {exc}") from exc


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def load_split(data_dir, split: str, num_inlier_classes: int) -> list[Entry]:
    data_dir = Path(data_dir)
    out = []
    for row in read_manifest(data_dir):
        if row["split"] != split:
            continue
        sid = row["sample_id"]
        image = netpbm.read_image(data_dir / "images" / f"{sid}.ppm")
        labels = LabelMap(netpbm.read_labels(data_dir / "labels" / f"{sid}.pgm"), num_inlier_classes)
        out.append(Entry(sid, split, int(row["seed"]), LabeledSample(image, labels), int(row["anomaly_pixels"]) == 0))
    if not out:
        raise ValueError(f"split {split!r} is empty in {data_dir}")
    return out


def load_objects_for(data_dir, kind: str) -> list[OutlierObject]:
    return load_objects(Path(data_dir) / "objects" / kind)
