"""Synthetic multi-annotator segmentation data with a known preference structure.

Each sample is a single shape on a textured background. Every simulated
annotator first applies a systematic morphological preference (dilate or erode
the clean mask by a Euclidean disk) and then random boundary errors whose
flip probability decays with the distance to the preferred contour.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, GeometryError

logger = logging.getLogger(__name__)

MORPHS = ("dilate", "erode", "identity")
SHAPES = ("disk", "ellipse", "blob")


@dataclass
class AnnotatorProfile:
    morph: str = "identity"
    radius: int = 0
    noise_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.morph not in MORPHS:
            raise ConfigurationError(f"morph must be one of {MORPHS}, got {self.morph!r}")
        if self.radius < 0 or self.noise_amplitude < 0:
            raise ConfigurationError("radius and noise_amplitude must be non-negative")
        if self.morph == "identity" and self.radius != 0:
            raise ConfigurationError("identity profile requires radius 0")

    @property
    def signed_radius(self) -> int:
        return {"dilate": 1, "identity": 0, "erode": -1}[self.morph] * self.radius


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    shape: str = "blob"
    size_range: tuple[float, float] = (8.0, 14.0)
    jitter: float = 6.0
    foreground_mean: float = 160.0
    background_mean: float = 90.0
    texture_std: float = 20.0
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        self.size_range = tuple(self.size_range)
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ConfigurationError("size_range must be positive and ordered")


@dataclass
class AnnotatedSample:
    x: np.ndarray
    y: list[np.ndarray]
    true_mask: np.ndarray
    sample_id: str = ""
    split: str = "train"


def sample_rng(*keys: int) -> np.random.Generator:
    """Generator seeded from a hash of the integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def disk_element(radius: int) -> np.ndarray:
    """Pixels within Euclidean distance ``radius`` of the centre."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def rasterize_disk(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _shape_mask(scene: SceneSpec, rng: np.random.Generator, margin: float) -> np.ndarray:
    h, w = scene.height, scene.width
    size = rng.uniform(*scene.size_range)
    cy = (h - 1) / 2 + rng.uniform(-scene.jitter, scene.jitter)
    cx = (w - 1) / 2 + rng.uniform(-scene.jitter, scene.jitter)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if scene.shape == "disk":
        extent = size
        mask = dy**2 + dx**2 <= size**2
    elif scene.shape == "ellipse":
        ratio = rng.uniform(0.6, 1.0)
        angle = rng.uniform(0, np.pi)
        a, b = size, size * ratio
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        extent = a
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        harmonics = np.arange(2, 5)
        amps = rng.uniform(0.0, 0.1, size=harmonics.size)
        phases = rng.uniform(0, 2 * np.pi, size=harmonics.size)
        theta = np.arctan2(dy, dx)
        radius = size * (1.0 + np.sum(amps[:, None, None] * np.cos(harmonics[:, None, None] * theta + phases[:, None, None]), axis=0))
        extent = size * (1.0 + amps.sum())
        mask = np.hypot(dy, dx) <= radius
    if (
        cy - extent - margin < 0
        or cx - extent - margin < 0
        or cy + extent + margin > h - 1
        or cx + extent + margin > w - 1
    ):
        raise GeometryError(
            f"shape of extent {extent:.1f} at ({cy:.1f}, {cx:.1f}) with margin {margin:.1f} "
            f"does not fit a {h}x{w} image"
        )
    return mask


def gen_base(scene: SceneSpec, index: int, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Image (C x H x W, float64, not yet quantized) and clean mask (1 x H x W, uint8)."""
    rng = sample_rng(scene.seed, index)
    mask = _shape_mask(scene, rng, margin)
    base = np.where(mask, scene.foreground_mean, scene.background_mean).astype(np.float64)
    planes = []
    for _ in range(scene.channels):
        if scene.texture_std > 0:
            planes.append(base + rng.normal(0.0, scene.texture_std, size=base.shape))
        else:
            planes.append(base.copy())
    return np.stack(planes), mask[None].astype(np.uint8)


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def apply_preference(mask: np.ndarray, profile: AnnotatorProfile) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if profile.morph == "identity" or profile.radius == 0:
        return m.astype(np.uint8)
    element = disk_element(profile.radius)
    squeeze = m.ndim == 3
    planes = m if squeeze else m[None]
    op = ndimage.binary_dilation if profile.morph == "dilate" else ndimage.binary_erosion
    out = np.stack([op(p, structure=element) for p in planes])
    return (out if squeeze else out[0]).astype(np.uint8)


def contour_distance(mask: np.ndarray) -> np.ndarray:
    """Distance from each pixel centre to the nearest pixel centre of the opposite class."""
    m = np.asarray(mask).astype(bool)
    if m.all() or not m.any():
        return np.full(m.shape, np.inf)
    inside = ndimage.distance_transform_edt(m)
    outside = ndimage.distance_transform_edt(~m)
    return np.where(m, inside, outside)


def flip_probability(mask: np.ndarray, amplitude: float) -> np.ndarray:
    """Per-pixel flip probability ``exp(-d^2 / (2 a^2))``, zero beyond ``3 a``."""
    if amplitude <= 0:
        return np.zeros(np.shape(mask))
    planes = np.asarray(mask)
    planes = planes if planes.ndim == 3 else planes[None]
    probs = []
    for p in planes:
        d = contour_distance(p)
        prob = np.exp(-(d**2) / (2.0 * amplitude**2))
        prob[d > 3.0 * amplitude] = 0.0
        probs.append(prob)
    out = np.stack(probs)
    return out if np.ndim(mask) == 3 else out[0]


def apply_stochastic_error(mask: np.ndarray, amplitude: float, seed: int | np.random.Generator) -> np.ndarray:
    m = np.asarray(mask).astype(np.uint8)
    if amplitude <= 0:
        return m.copy()
    rng = np.random.default_rng(seed)
    prob = flip_probability(m, amplitude)
    flips = rng.random(m.shape) < prob
    return np.where(flips, 1 - m, m).astype(np.uint8)


def construction_ranks(profiles: Sequence[AnnotatorProfile]) -> list[int]:
    """1-based ranks by signed radius (largest delineation first, ties by index)."""
    order = sorted(range(len(profiles)), key=lambda i: (-profiles[i].signed_radius, i))
    ranks = [0] * len(profiles)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def annotate(true_mask: np.ndarray, profile: AnnotatorProfile, scene_seed: int, index: int, annotator: int) -> np.ndarray:
    preferred = apply_preference(true_mask, profile)
    rng = sample_rng(scene_seed, index, annotator, profile.seed)
    return apply_stochastic_error(preferred, profile.noise_amplitude, rng)


def make_sample(scene: SceneSpec, profiles: Sequence[AnnotatorProfile], index: int, split: str = "train") -> AnnotatedSample:
    margin = max((p.radius for p in profiles), default=0) + 3 * max((p.noise_amplitude for p in profiles), default=0)
    image, truth = gen_base(scene, index, margin)
    masks = [annotate(truth, p, scene.seed, index, r) for r, p in enumerate(profiles)]
    return AnnotatedSample(quantize_image(image), masks, truth, f"{index:04d}", split)


def default_profiles(noise_amplitude: float = 1.0) -> list[AnnotatorProfile]:
    return [
        AnnotatorProfile("dilate", 2, noise_amplitude, seed=11),
        AnnotatorProfile("identity", 0, noise_amplitude, seed=12),
        AnnotatorProfile("erode", 2, noise_amplitude, seed=13),
    ]


@dataclass
class DatasetManifest:
    root: str
    annotator_count: int
    num_classes: int
    height: int
    width: int
    channels: int
    samples: list[dict]
    profiles: list[dict]
    construction_ranks: list[int]
    scene: dict
    normalization: dict
    warnings: list[str] = field(default_factory=list)
    schema_version: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d


def gen_dataset(
    scene: SceneSpec,
    profiles: Sequence[AnnotatorProfile],
    n_train: int,
    n_test: int,
    root: str | Path,
) -> DatasetManifest:
    """Generate, write to disk and describe a train/test split."""
    from . import dataio

    if len(profiles) < 1:
        raise ConfigurationError("at least one annotator profile is required")
    root = Path(root)
    for sub in ("images", "masks", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records, warnings_ = [], []
    train_sum, train_sq, train_n = 0, 0, 0
    for index in range(n_train + n_test):
        split = "train" if index < n_train else "test"
        sample = make_sample(scene, profiles, index, split)
        sid = sample.sample_id
        if scene.channels == 1:
            image_paths = [f"images/{sid}.pgm"]
        else:
            image_paths = [f"images/{sid}_c{c}.pgm" for c in range(scene.channels)]
        for rel, plane in zip(image_paths, sample.x):
            dataio.write_pgm(root / rel, plane)
        mask_paths = []
        for r, m in enumerate(sample.y, start=1):
            rel = f"masks/{sid}_a{r}.pgm"
            dataio.write_mask(root / rel, m[0])
            mask_paths.append(rel)
            if not m.any():
                warnings_.append(f"sample {sid}: annotator {r} mask is empty")
        dataio.write_mask(root / f"truth/{sid}.pgm", sample.true_mask[0])
        if split == "train":
            x = sample.x.astype(np.int64)
            train_sum += int(x.sum())
            train_sq += int((x * x).sum())
            train_n += x.size
        records.append(
            {"id": sid, "split": split, "image": image_paths, "masks": mask_paths, "truth": f"truth/{sid}.pgm"}
        )
    if train_n:
        mean = train_sum / train_n
        std = float(np.sqrt(max(train_sq / train_n - mean * mean, 0.0)))
    else:
        mean, std = 0.0, 1.0
    for w in warnings_:
        logger.warning(w)
    manifest = DatasetManifest(
        root=str(root),
        annotator_count=len(profiles),
        num_classes=1,
        height=scene.height,
        width=scene.width,
        channels=scene.channels,
        samples=records,
        profiles=[asdict(p) for p in profiles],
        construction_ranks=construction_ranks(profiles),
        scene=asdict(scene),
        normalization={"mean": float(mean), "std": std if std > 0 else 1.0},
        warnings=warnings_,
    )
    dataio.write_manifest(root / "manifest.json", manifest)
    return manifest
