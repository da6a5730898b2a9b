"""
Crop geometry for contrastive views

Samplers take a seed or a numpy Generator; the same seed always yields the
same rectangles.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from config import Config
from errors import DomainError, GeometryError

logger = logging.getLogger(__name__)

Range = Tuple[float, float]
Seed = Union[int, np.random.Generator]
AREA_TOL = 1e-9


@dataclass(frozen=True)
class CropRect:
    """Pixel rectangle (x, y, w, h) inside a W x H source image"""

    x: int
    y: int
    w: int
    h: int
    source_w: int
    source_h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise GeometryError(f"crop extent must be >= 1, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > self.source_w or self.y + self.h > self.source_h:
            raise GeometryError(
                f"crop ({self.x}, {self.y}, {self.w}, {self.h}) leaves the "
                f"{self.source_w}x{self.source_h} source"
            )

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def area_fraction(self) -> float:
        return self.area / (self.source_w * self.source_h)

    def intersection(self, other: 'CropRect') -> int:
        ix = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        iy = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        return max(ix, 0) * max(iy, 0)

    def contains(self, other: 'CropRect') -> bool:
        return (self.x <= other.x and self.y <= other.y
                and other.x + other.w <= self.x + self.w
                and other.y + other.h <= self.y + self.h)


def rect_iou(a: CropRect, b: CropRect) -> float:
    """Intersection over union of two crops of the same source"""
    if (a.source_w, a.source_h) != (b.source_w, b.source_h):
        raise GeometryError("crops come from different source sizes")
    inter = a.intersection(b)
    return inter / (a.area + b.area - inter)


def make_rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check_ranges(scale_range: Range, aspect_range: Range):
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise DomainError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    alo, ahi = aspect_range
    if not 0 < alo <= ahi:
        raise DomainError(f"aspect range must satisfy 0 < lo <= hi, got {aspect_range}")


def _fits(w: int, h: int, width: int, height: int, scale_range: Range) -> bool:
    if not (0 < w <= width and 0 < h <= height):
        return False
    frac = w * h / (width * height)
    return scale_range[0] - AREA_TOL <= frac <= scale_range[1] + AREA_TOL


def _fallback_size(width: int, height: int, scale_range: Range, aspect_range: Range) -> Tuple[int, int]:
    """Most square integer size satisfying both ranges, nearest the middle of the scale range"""
    area = width * height
    mid = 0.5 * (scale_range[0] + scale_range[1])
    best, best_key = None, None
    for w in range(1, width + 1):
        h_lo = max(1, math.ceil((scale_range[0] - AREA_TOL) * area / w), math.ceil(w / aspect_range[1] - AREA_TOL))
        h_hi = min(height, math.floor((scale_range[1] + AREA_TOL) * area / w), math.floor(w / aspect_range[0] + AREA_TOL))
        if h_lo > h_hi:
            continue
        h = int(min(max(w, h_lo), h_hi))
        key = (abs(math.log(w / h)), abs(w * h / area - mid), w)
        if best_key is None or key < best_key:
            best, best_key = (w, h), key
    if best is None:
        raise GeometryError(
            f"no crop of a {width}x{height} image fits scale {scale_range} and aspect {aspect_range}"
        )
    return best


def sample_resized_crop(width: int, height: int, scale_range: Range = Config.TWO_CROP_SCALE,
                        aspect_range: Range = Config.ASPECT_RANGE, seed: Seed = 0,
                        attempts: int = Config.CROP_ATTEMPTS) -> CropRect:
    """
    Random resized crop: area fraction uniform in `scale_range`, log-uniform aspect

    Sizes whose rounded area leaves the range or that do not fit are redrawn
    up to `attempts` times; after that the center crop of the most square
    admissible size is returned.
    """
    if width < 1 or height < 1:
        raise GeometryError(f"source must be at least 1x1, got {width}x{height}")
    _check_ranges(scale_range, aspect_range)
    rng = make_rng(seed)
    area = width * height
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])

    for _ in range(attempts):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if _fits(w, h, width, height, scale_range):
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return CropRect(x, y, w, h, width, height)

    w, h = _fallback_size(width, height, scale_range, aspect_range)
    return CropRect((width - w) // 2, (height - h) // 2, w, h, width, height)


def constrained_multicrop(anchor: CropRect, n: int, scale_range: Range = Config.SMALL_CROP_SCALE,
                          aspect_range: Range = Config.ASPECT_RANGE, seed: Seed = 0,
                          strict: bool = False,
                          max_rejections: int = Config.MULTICROP_MAX_REJECTIONS) -> List[CropRect]:
    """
    Small crops that overlap the anchor (or lie inside it when `strict`)

    Raises:
        GeometryError: after `max_rejections` consecutive rejected draws
    """
    if n < 1:
        raise DomainError(f"need at least one small crop, got {n}")
    rng = make_rng(seed)
    crops = []
    while len(crops) < n:
        for _ in range(max_rejections):
            crop = sample_resized_crop(anchor.source_w, anchor.source_h, scale_range, aspect_range, rng)
            ok = anchor.contains(crop) if strict else anchor.intersection(crop) > 0
            if ok:
                crops.append(crop)
                break
        else:
            mode = 'containment' if strict else 'overlap'
            raise GeometryError(f"{max_rejections} consecutive crops failed the {mode} constraint")
    return crops


class MultiCropViews(NamedTuple):
    anchor: CropRect
    positive: CropRect
    small: List[CropRect]


def multicrop_views(width: int, height: int, n_small: int, seed: Seed = 0, strict: bool = False,
                    global_scale: Range = Config.GLOBAL_CROP_SCALE,
                    small_scale: Range = Config.SMALL_CROP_SCALE,
                    aspect_range: Range = Config.ASPECT_RANGE) -> MultiCropViews:
    """Anchor and global positive plus `n_small` crops constrained to the anchor"""
    rng = make_rng(seed)
    anchor = sample_resized_crop(width, height, global_scale, aspect_range, rng)
    positive = sample_resized_crop(width, height, global_scale, aspect_range, rng)
    small = constrained_multicrop(anchor, n_small, small_scale, aspect_range, rng, strict)
    return MultiCropViews(anchor, positive, small)


@dataclass
class IoUStats:
    counts: np.ndarray
    edges: np.ndarray
    acceptance_rate: float
    ious: np.ndarray

    def rows(self) -> List[Tuple[float, float, int]]:
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def iou_pair_stats(width: int, height: int, scale_range: Range = Config.TWO_CROP_SCALE,
                   threshold: Optional[float] = None, samples: int = 1000, seed: Seed = 0,
                   aspect_range: Range = Config.ASPECT_RANGE, bins: int = Config.IOU_BINS,
                   max_rejections: int = Config.IOU_MAX_REJECTIONS, progress: bool = False) -> IoUStats:
    """
    IoU histogram of random crop pairs, optionally capped below `threshold`

    A threshold >= 1 is vacuous; the acceptance rate is accepted pairs over
    drawn pairs.
    """
    if samples < 1:
        raise DomainError(f"samples must be >= 1, got {samples}")
    if threshold is not None and threshold <= 0:
        raise GeometryError(f"no crop pair can have IoU below {threshold}")
    cap = threshold if threshold is not None and threshold < 1 else None
    rng = make_rng(seed)

    ious = np.empty(samples)
    drawn = 0
    for i in tqdm(range(samples), desc="crop pairs", disable=not progress):
        for _ in range(max_rejections):
            a = sample_resized_crop(width, height, scale_range, aspect_range, rng)
            b = sample_resized_crop(width, height, scale_range, aspect_range, rng)
            drawn += 1
            value = rect_iou(a, b)
            if cap is None or value < cap:
                ious[i] = value
                break
        else:
            raise GeometryError(f"{max_rejections} consecutive pairs had IoU >= {threshold}")

    counts, edges = np.histogram(ious, bins=bins, range=(0.0, 1.0))
    logger.debug("iou stats: %d samples from %d draws", samples, drawn)
    return IoUStats(counts, edges, samples / drawn, ious)
