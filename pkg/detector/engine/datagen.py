"""
Synthetic anomaly triplets: normal scene, region-restricted defect, feature-distance filter.

Every sample is a pure function of (master seed, sample index), so the
dataset does not depend on how many worker threads produce it.
"""
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import procedural, vit
from .errors import ConfigurationError, DimensionError, GenerationError
from .heads import model_input
from .vocabulary import TEXTURE_FAMILIES, Vocabulary, anomaly_family, assert_disjoint, object_family, texture_family

logger = logging.getLogger(__name__)

REFERENCE_SIZE = 1024
REFERENCE_REGION = (50, 350)
REFERENCE_ANOMALOUS_AREA = 0.0252
EXTRACTORS = ("backbone", "raw")


@dataclass(frozen=True)
class DatagenConfig:
    image_size: int = 64
    threshold: float = 0.3
    forced_fail: float = 0.2
    amplitude_range: tuple = (0.15, 0.9)
    region_range: tuple = REFERENCE_REGION
    coverage_range: tuple = (0.10, 0.60)
    filtering: bool = True
    foreground: bool = True
    extractor: str = "backbone"
    patch_size: int = 8
    chunk_size: int = 16

    def __post_init__(self):
        if self.image_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"datagen.image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if not 0.0 <= self.forced_fail <= 1.0:
            raise ConfigurationError(f"datagen.forced_fail must lie in [0, 1], got {self.forced_fail}")
        low, high = self.amplitude_range
        if not 0.0 < low <= high:
            raise ConfigurationError(f"datagen.amplitude_range must satisfy 0 < low <= high, got {self.amplitude_range}")
        if self.region_range[0] < 1 or self.region_range[1] < self.region_range[0]:
            raise ConfigurationError(f"Invalid datagen.region_range {self.region_range}")
        if self.extractor not in EXTRACTORS:
            raise ConfigurationError(f"datagen.extractor must be one of {EXTRACTORS}, got '{self.extractor}'")
        if self.chunk_size < 1:
            raise ConfigurationError("datagen.chunk_size must be >= 1")

    def region_ranges(self) -> tuple:
        """(w_min, w_max, h_min, h_max) scaled linearly from the 1024-pixel reference"""
        scale = self.image_size / REFERENCE_SIZE
        low = max(1, int(round(self.region_range[0] * scale)))
        high = max(low, int(round(self.region_range[1] * scale)))
        return low, high, low, high

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SceneSpec:
    object_tag: str
    texture_tag: str
    seed: int
    image_size: int


@dataclass(frozen=True)
class RegionR:
    x: int
    y: int
    w: int
    h: int

    def box(self, width: int, height: int) -> tuple:
        """Inclusive (x0, y0, x1, y1), clipped to the image"""
        return (
            max(0, self.x - self.w // 2),
            max(0, self.y - self.h // 2),
            min(width - 1, self.x + self.w // 2),
            min(height - 1, self.y + self.h // 2),
        )

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass
class SampleTriplet:
    sample_id: int
    normal_image: np.ndarray
    anomalous_image: np.ndarray
    mask: np.ndarray
    fg_mask: np.ndarray
    region: RegionR
    distance_score: float
    accepted: bool
    metadata: dict = field(default_factory=dict)

    def meta_record(self) -> dict:
        return {
            "id": self.sample_id,
            "object": self.metadata["object"],
            "texture": self.metadata["texture"],
            "anomaly": self.metadata["anomaly"],
            "region": self.region.to_dict(),
            "D": self.distance_score,
            "accepted": self.accepted,
            "forced_fail": self.metadata["forced_fail"],
            "seed": self.metadata["seed"],
            "amplitude": self.metadata["amplitude"],
        }

    @property
    def anomalous_area(self) -> float:
        return float(self.mask.mean())


# ---------------------------------------------------------------------------
# normal scenes


def generate_normal(spec: SceneSpec, vocab: Vocabulary, coverage: tuple = (0.10, 0.60)) -> tuple:
    """Textured background with a textured foreground shape; returns (image [3×H×W], fg_mask)"""
    vocab.require_object(spec.object_tag)
    vocab.require_texture(spec.texture_tag)
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size

    background_family = texture_family(spec.texture_tag)
    foreground_family = object_family(spec.object_tag, background_family)
    background = procedural.colorize(
        procedural.texture_field(background_family, size, size, rng), procedural.random_palette(rng)
    )
    foreground = procedural.colorize(
        procedural.texture_field(foreground_family, size, size, rng), procedural.random_palette(rng)
    )
    fg_mask = procedural.foreground_mask(size, size, coverage, rng)
    image = np.where(fg_mask[None], foreground, background)
    return np.clip(image, 0.0, 1.0), fg_mask


# ---------------------------------------------------------------------------
# defects


def sample_region(fg_mask: np.ndarray, ranges: tuple, rng: np.random.Generator) -> RegionR:
    positives = np.argwhere(fg_mask)
    if positives.size == 0:
        raise GenerationError("Foreground mask is empty; cannot place a defect")
    y, x = positives[rng.integers(len(positives))]
    w_min, w_max, h_min, h_max = ranges
    w = int(rng.integers(w_min, w_max + 1))
    h = int(rng.integers(h_min, h_max + 1))
    return RegionR(x=int(x), y=int(y), w=w, h=h)


def _falloff(extent: int) -> np.ndarray:
    """1-D soft border weights: ramps up from each edge over a quarter of the extent"""
    ramp = max(1.0, 0.25 * extent)
    index = np.arange(extent)
    distance = np.minimum(index, extent - 1 - index) + 1
    return np.clip(distance / ramp, 0.0, 1.0)


def _segment_distance(ys, xs, start, end) -> np.ndarray:
    (y0, x0), (y1, x1) = start, end
    dy, dx = y1 - y0, x1 - x0
    length = dy * dy + dx * dx
    t = np.zeros_like(ys) if length == 0 else np.clip(((ys - y0) * dy + (xs - x0) * dx) / length, 0.0, 1.0)
    return np.hypot(ys - (y0 + t * dy), xs - (x0 + t * dx))


def defect_pattern(family: str, patch: np.ndarray, rng: np.random.Generator) -> tuple:
    """(target colors [3×h×w], shape weights [h×w]) for one defect family"""
    _, h, w = patch.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == "color_shift":
        target = np.broadcast_to(rng.uniform(0.0, 1.0, 3)[:, None, None], patch.shape)
        return target, np.ones((h, w))
    if family == "texture_swap":
        swap_family = TEXTURE_FAMILIES[rng.integers(len(TEXTURE_FAMILIES))]
        target = procedural.colorize(
            procedural.texture_field(swap_family, h, w, rng), procedural.random_palette(rng, contrast=0.8)
        )
        return target, np.ones((h, w))
    if family == "scratch":
        shade = rng.uniform(0.0, 0.15, 3) if rng.random() < 0.5 else rng.uniform(0.85, 1.0, 3)
        thickness = max(1.0, min(h, w) / 8.0)
        shape = np.zeros((h, w))
        for _ in range(int(rng.integers(1, 4))):
            start = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
            end = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
            shape = np.maximum(shape, (_segment_distance(ys, xs, start, end) <= thickness).astype(np.float64))
        return np.broadcast_to(shade[:, None, None], patch.shape), shape
    if family == "blob":
        color = rng.uniform(0.0, 1.0, 3)
        ry = max(0.5, rng.uniform(0.3, 0.5) * h)
        rx = max(0.5, rng.uniform(0.3, 0.5) * w)
        inside = ((ys - (h - 1) / 2) / ry) ** 2 + ((xs - (w - 1) / 2) / rx) ** 2 <= 1.0
        return np.broadcast_to(color[:, None, None], patch.shape), inside.astype(np.float64)
    if family == "speckle":
        color = rng.uniform(0.0, 0.4, 3)
        shape = (rng.random((h, w)) < rng.uniform(0.15, 0.35)).astype(np.float64)
        shape[h // 2, w // 2] = 1.0
        return np.broadcast_to(color[:, None, None], patch.shape), shape
    raise GenerationError(f"Unknown anomaly family '{family}'")


def inpaint_defect(
    image: np.ndarray,
    fg_mask: np.ndarray,
    region: RegionR,
    anomaly_tag: str,
    amplitude: float,
    forced_fail: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    """Blend a defect into ``region``; pixels outside the region are copied unchanged"""
    anomalous = image.copy()
    if forced_fail or amplitude == 0:
        return anomalous
    _, height, width = image.shape
    x0, y0, x1, y1 = region.box(width, height)
    patch = image[:, y0:y1 + 1, x0:x1 + 1]
    target, shape = defect_pattern(anomaly_family(anomaly_tag), patch, rng)
    alpha = amplitude * shape * np.outer(_falloff(y1 - y0 + 1), _falloff(x1 - x0 + 1))
    anomalous[:, y0:y1 + 1, x0:x1 + 1] = patch + alpha[None] * (target - patch)
    return anomalous


# ---------------------------------------------------------------------------
# feature-distance filter


class RawPixelExtractor:
    """Patch vectors of the [-1, 1]-scaled image"""

    def __init__(self, patch_size: int):
        self.patch_size = patch_size

    def features(self, image: np.ndarray) -> np.ndarray:
        _, height, width = image.shape
        gh, gw = height // self.patch_size, width // self.patch_size
        vectors = vit.patch_vectors(np.asarray(image, dtype=np.float64) * 2.0 - 1.0, self.patch_size)
        return vectors.reshape(gh, gw, -1)


class BackboneExtractor:
    """Patch tokens of the backbone with adapters switched off"""

    def __init__(self, backbone: vit.BackboneState):
        self.backbone = backbone
        self.patch_size = backbone.config.patch_size

    def features(self, image: np.ndarray) -> np.ndarray:
        out = vit.forward(model_input(image), self.backbone, adapters_enabled=False)
        gh, gw = out.grid
        return out.patch_tokens.numpy().reshape(gh, gw, -1)


def make_extractor(cfg: DatagenConfig, backbone: Optional[vit.BackboneState] = None):
    if cfg.extractor == "raw":
        return RawPixelExtractor(cfg.patch_size)
    if backbone is None:
        raise ConfigurationError("The backbone extractor needs a backbone")
    if backbone.config.image_size != cfg.image_size:
        raise ConfigurationError(
            f"datagen.image_size {cfg.image_size} differs from the backbone's {backbone.config.image_size}"
        )
    return BackboneExtractor(backbone)


def cosine_distance(f: np.ndarray, f_a: np.ndarray) -> np.ndarray:
    """1 − cos over the last axis; 0 for two zero vectors, 1 when exactly one is zero"""
    norm = np.linalg.norm(f, axis=-1)
    norm_a = np.linalg.norm(f_a, axis=-1)
    both_zero = (norm == 0) & (norm_a == 0)
    one_zero = (norm == 0) ^ (norm_a == 0)
    safe = np.where((norm == 0) | (norm_a == 0), 1.0, norm * norm_a)
    distance = 1.0 - np.sum(f * f_a, axis=-1) / safe
    distance = np.where(one_zero, 1.0, distance)
    return np.where(both_zero, 0.0, distance)


def feature_distance_map(extractor, image: np.ndarray, anomalous: np.ndarray) -> np.ndarray:
    if np.shape(image) != np.shape(anomalous):
        raise DimensionError(f"Image shapes differ: {np.shape(image)} vs {np.shape(anomalous)}")
    return cosine_distance(extractor.features(image), extractor.features(anomalous))


def upsample_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    gh, gw = grid.shape
    rows = np.arange(out_h) * gh // out_h
    cols = np.arange(out_w) * gw // out_w
    return grid[rows[:, None], cols[None, :]]


def filter_and_mask(m_d: np.ndarray, threshold: float, out_h: int, out_w: int) -> tuple:
    """(accepted, D, M): D is the map maximum, M the binarised map at image resolution"""
    m_d = np.asarray(m_d, dtype=np.float64)
    distance = float(m_d.max())
    mask = upsample_nearest(m_d > threshold, out_h, out_w)
    return distance > threshold, distance, mask


def region_cells(region: RegionR, grid: tuple, height: int, width: int) -> np.ndarray:
    """Pixels of every patch cell that intersects the region's box"""
    gh, gw = grid
    x0, y0, x1, y1 = region.box(width, height)
    cells = np.zeros(grid, dtype=bool)
    cells[y0 * gh // height: y1 * gh // height + 1, x0 * gw // width: x1 * gw // width + 1] = True
    return upsample_nearest(cells, height, width)


def region_mask(m_d: np.ndarray, threshold: float, region: RegionR, height: int, width: int) -> tuple:
    """``filter_and_mask`` restricted to the defect's patch cells.

    A distance that fires only outside the region leaves M empty, and the
    attempt is rejected then.
    """
    passed, distance, mask = filter_and_mask(m_d, threshold, height, width)
    mask &= region_cells(region, np.shape(m_d), height, width)
    return passed and bool(mask.any()), distance, mask


# ---------------------------------------------------------------------------
# samples and datasets


def sample_seed_sequence(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master_seed, spawn_key=(index,))


def generate_sample(
    index: int,
    master_seed: int,
    cfg: DatagenConfig,
    vocab: Vocabulary,
    objects: list,
    extractor,
) -> SampleTriplet:
    rng = np.random.default_rng(sample_seed_sequence(master_seed, index))
    object_tag = objects[rng.integers(len(objects))]
    texture_tag = vocab.textures[rng.integers(len(vocab.textures))]
    anomalies = vocab.anomalies_by_object[object_tag]
    anomaly_tag = anomalies[rng.integers(len(anomalies))]
    scene = SceneSpec(object_tag, texture_tag, int(rng.integers(0, 2**63)), cfg.image_size)

    image, fg_mask = generate_normal(scene, vocab, cfg.coverage_range)
    placement = fg_mask if cfg.foreground else np.ones_like(fg_mask)
    region = sample_region(placement, cfg.region_ranges(), rng)
    forced_fail = bool(rng.random() < cfg.forced_fail)
    low, high = cfg.amplitude_range
    amplitude = float(np.exp(rng.uniform(np.log(low), np.log(high))))
    anomalous = inpaint_defect(image, fg_mask, region, anomaly_tag, amplitude, forced_fail, rng)

    size = cfg.image_size
    m_d = feature_distance_map(extractor, image, anomalous)
    passed, distance, mask = region_mask(m_d, cfg.threshold, region, size, size)
    return SampleTriplet(
        sample_id=index,
        normal_image=image,
        anomalous_image=anomalous,
        mask=mask,
        fg_mask=fg_mask,
        region=region,
        distance_score=distance,
        accepted=passed if cfg.filtering else True,
        metadata={
            "object": object_tag,
            "texture": texture_tag,
            "anomaly": anomaly_tag,
            "anomaly_family": anomaly_family(anomaly_tag),
            "seed": scene.seed,
            "amplitude": amplitude,
            "forced_fail": forced_fail,
        },
    )


@dataclass
class DatasetStats:
    requested: int
    accepted: int = 0
    attempts: int = 0
    forced_fail: int = 0
    forced_fail_rejected: int = 0
    objects: Counter = field(default_factory=Counter)
    textures: Counter = field(default_factory=Counter)
    anomalies: Counter = field(default_factory=Counter)
    anomalous_areas: list = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.accepted / self.attempts if self.attempts else 0.0

    def record(self, sample: SampleTriplet):
        self.attempts += 1
        if sample.metadata["forced_fail"]:
            self.forced_fail += 1
            if not sample.accepted:
                self.forced_fail_rejected += 1
        if sample.accepted:
            self.accepted += 1
            self.objects[sample.metadata["object"]] += 1
            self.textures[sample.metadata["texture"]] += 1
            self.anomalies[sample.metadata["anomaly"]] += 1
            self.anomalous_areas.append(sample.anomalous_area)

    def to_dict(self) -> dict:
        areas = np.asarray(self.anomalous_areas) if self.anomalous_areas else np.zeros(1)
        histogram, edges = np.histogram(areas, bins=10, range=(0.0, max(0.1, float(areas.max()))))
        return {
            "requested": self.requested,
            "accepted": self.accepted,
            "attempts": self.attempts,
            "rejection_rate": self.rejection_rate,
            "forced_fail": self.forced_fail,
            "forced_fail_rejected": self.forced_fail_rejected,
            "object_counts": dict(sorted(self.objects.items())),
            "texture_counts": dict(sorted(self.textures.items())),
            "anomaly_counts": dict(sorted(self.anomalies.items())),
            "anomalous_area": {
                "mean": float(areas.mean()),
                "min": float(areas.min()),
                "max": float(areas.max()),
                "histogram": histogram.tolist(),
                "bin_edges": edges.tolist(),
                "reference_mean": REFERENCE_ANOMALOUS_AREA,
            },
        }


def generate_dataset(
    n: int,
    vocab: Vocabulary,
    objects: list,
    cfg: DatagenConfig,
    out_dir: Path,
    master_seed: int,
    extractor,
    workers: int = 1,
    held_out_objects: tuple = (),
    split: str = "train",
    progress=None,
) -> DatasetStats:
    """Write ``n`` accepted triplets (plus metadata of every attempt) to ``out_dir``.

    Attempts are produced in fixed-size chunks and consumed in index order.
    """
    from .storage import DatasetWriter

    if n < 1:
        raise ConfigurationError(f"Dataset size must be >= 1, got {n}")
    if not objects:
        raise ConfigurationError("No object tags to generate from")
    for obj in objects:
        vocab.require_object(obj)
    assert_disjoint(objects, held_out_objects)

    stats = DatasetStats(requested=n)
    writer = DatasetWriter(Path(out_dir))
    budget_check, hard_cap = 10 * n, 100 * n
    index = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while stats.accepted < n:
            if stats.attempts >= budget_check and stats.accepted < 0.01 * stats.attempts:
                raise ConfigurationError(
                    f"Acceptance rate {stats.accepted}/{stats.attempts} is below 1%; "
                    f"check datagen.threshold ({cfg.threshold}) and datagen.amplitude_range"
                )
            if stats.attempts >= hard_cap:
                raise GenerationError(f"Gave up after {stats.attempts} attempts with {stats.accepted}/{n} accepted")
            chunk = range(index, index + cfg.chunk_size)
            index += cfg.chunk_size
            samples = pool.map(lambda i: generate_sample(i, master_seed, cfg, vocab, objects, extractor), chunk)
            for sample in samples:
                if stats.accepted >= n:
                    break
                stats.record(sample)
                writer.write(sample)
            if progress is not None:
                progress(stats)

    summary = stats.to_dict()
    summary.update(
        {
            "split": split,
            "objects": sorted(objects),
            "held_out_objects": sorted(held_out_objects),
            "master_seed": master_seed,
            "config": cfg.to_dict(),
        }
    )
    writer.write_stats(summary)
    logger.info(
        "Generated %d samples in %d attempts (rejection rate %.3f)", stats.accepted, stats.attempts, stats.rejection_rate
    )
    return stats
