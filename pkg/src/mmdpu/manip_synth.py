"""Copy-move forgery synthesis and the positive/unlabeled image sets built from it."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class CopyMoveParams:
    min_region_frac: float = 0.1
    max_region_frac: float = 0.4
    allow_overlap: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_region_frac <= self.max_region_frac < 1:
            raise ValueError("need 0 < min_region_frac <= max_region_frac < 1")


@dataclass(frozen=True)
class RegionRecord:
    src_rect: tuple
    dst_rect: tuple

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass
class PUManipSets:
    positives: list
    unlabeled: list
    regions: list = field(default_factory=list)


def _inside(rect, h, w) -> bool:
    r, c, rh, rw = rect
    return r >= 0 and c >= 0 and r + rh <= h and c + rw <= w and rh > 0 and rw > 0


def _overlaps(a, b) -> bool:
    return not (a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1])


def copy_move(
    image: np.ndarray,
    params: CopyMoveParams,
    rng: np.random.Generator,
    src_rect: Optional[Sequence[int]] = None,
    dst_rect: Optional[Sequence[int]] = None,
):
    """Duplicate a square region of ``image`` at another location.

    The pasted block is a hard copy of the source block; every pixel outside
    the destination rectangle is left untouched. ``src_rect``/``dst_rect``
    pin the geometry (``(row, col, height, width)``); a pinned destination
    equal to the source is discarded and resampled.

    Returns the manipulated copy and a :class:`RegionRecord`.
    """
    img = np.asarray(image)
    if img.ndim < 2:
        raise ValueError("image must be at least 2-D")
    h, w = img.shape[:2]
    short = min(h, w)
    need = math.ceil(params.max_region_frac * short) + 1
    if h < need or w < need:
        raise ValueError(f"image {h}x{w} too small for region fraction {params.max_region_frac}")

    if src_rect is None:
        lo = max(1, round(params.min_region_frac * short))
        hi = max(lo, round(params.max_region_frac * short))
        side = int(rng.integers(lo, hi + 1))
        src = (int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side, side)
    else:
        src = tuple(int(v) for v in src_rect)
    if not _inside(src, h, w):
        raise ValueError(f"source rect {src} outside {h}x{w} image")
    rh, rw = src[2], src[3]

    dst = tuple(int(v) for v in dst_rect) if dst_rect is not None else None
    if dst is not None and not _inside(dst, h, w):
        raise ValueError(f"destination rect {dst} outside {h}x{w} image")
    if dst is not None and dst[2:] != src[2:]:
        raise ValueError("source and destination rects must have equal size")

    tries = 0
    while dst is None or dst == src or (not params.allow_overlap and _overlaps(src, dst)):
        if tries >= MAX_PLACEMENT_TRIES:
            raise ValueError("could not place a destination rect distinct from the source")
        dst = (int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1)), rh, rw)
        tries += 1

    out = img.copy()
    out[dst[0]:dst[0] + rh, dst[1]:dst[1] + rw] = img[src[0]:src[0] + rh, src[1]:src[1] + rw]
    return out, RegionRecord(src, dst)


def build_pu_manip_sets(batch, params: CopyMoveParams, rng: np.random.Generator) -> PUManipSets:
    """One copy-moved positive per input image; the originals form the unlabeled set."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    positives, unlabeled, regions = [], [], []
    for item in batch:
        img = item.image if hasattr(item, "image") else np.asarray(item)
        fake, rec = copy_move(img, params, rng)
        positives.append((fake, 1))
        unlabeled.append(img)
        regions.append(rec)
    return PUManipSets(positives, unlabeled, regions)
