"""Sample, feature and prediction types shared across the package, plus splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

REAL, FAKE = 0, 1
PROB_TOL = 1e-6


class ValidationError(ValueError):
    """A sample or config value violates its declared invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ConfigError(ValueError):
    pass


def _frozen(arr) -> np.ndarray:
    arr = np.asarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Article:
    id: str
    text: tuple
    image: np.ndarray
    veracity: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "text", tuple(int(t) for t in self.text))
        object.__setattr__(self, "image", _frozen(self.image))


@dataclass(frozen=True)
class IMDSample:
    image: np.ndarray
    manip_label: int
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "image", _frozen(self.image))


@dataclass(frozen=True)
class FeatureBundle:
    e_T: np.ndarray
    e_I: np.ndarray
    e_M: np.ndarray
    e_E: np.ndarray
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        vecs = [self.e_T, self.e_I, self.e_M, self.e_E]
        if self.z is not None:
            vecs.append(self.z)
        dims = {np.asarray(v).shape for v in vecs}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValidationError("features", "all vectors must share one dimension d")
        if not all(np.all(np.isfinite(v)) for v in vecs):
            raise ValidationError("features", "non-finite value")

    @property
    def dim(self) -> int:
        return int(np.asarray(self.e_T).shape[0])


@dataclass(frozen=True)
class PredictionSet:
    """Per-sample outputs. ``p_M`` near 1 means manipulated, ``p_E`` near 1 means harmless."""

    veracity_probs: tuple
    p_M: float
    p_E: float

    def __post_init__(self):
        probs = tuple(float(p) for p in self.veracity_probs)
        object.__setattr__(self, "veracity_probs", probs)
        if len(probs) != 2 or min(probs) < 0 or abs(sum(probs) - 1.0) > PROB_TOL:
            raise ValidationError("veracity_probs", "not a distribution over {real, fake}")
        for name in ("p_M", "p_E"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValidationError(name, "not in [0,1]")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1
    delta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(name, "trade-off weight must be finite and >= 0")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.7, 0.1, 0.2)
    seed: int = 1

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        object.__setattr__(self, "ratios", r)
        if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ValidationError("ratios", "need three positive ratios summing to 1")


@dataclass(frozen=True)
class DataConfig:
    max_text_len: int = 128
    image_size: int = 224
    channels: int = 3


def validate_article(a: Article, config: DataConfig = DataConfig()) -> Article:
    if not a.text:
        raise ValidationError("text", "empty token sequence")
    if len(a.text) > config.max_text_len:
        raise ValidationError("text", f"text too long ({len(a.text)} > {config.max_text_len})")
    if min(a.text) < 0:
        raise ValidationError("text", "negative token index")
    _check_image(a.image, config)
    if a.veracity is not None and a.veracity not in (REAL, FAKE):
        raise ValidationError("veracity", "label not in {0,1}")
    return a


def validate_imd_sample(s: IMDSample, config: DataConfig = DataConfig()) -> IMDSample:
    _check_image(s.image, config)
    if s.manip_label not in (0, 1):
        raise ValidationError("manip_label", "label not in {0,1}")
    return s


def _check_image(img: np.ndarray, config: DataConfig) -> None:
    expected = (config.image_size, config.image_size, config.channels)
    if img.shape != expected:
        raise ValidationError("image", f"shape {img.shape} != {expected}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image", "image out of range")


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    # floor each share, then hand out the remainder in descending-weight order
    counts = [math.floor(total * w + 1e-9) for w in weights]
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    rest = total - sum(counts)
    k = 0
    while rest > 0:
        counts[order[k % len(order)]] += 1
        rest -= 1
        k += 1
    return counts


def _apportion_capped(total: int, targets: Sequence[float], caps: Sequence[int]) -> list[int]:
    # largest-remainder allocation of ``total`` items proportional to ``targets``
    counts = [min(math.floor(t + 1e-9), c) for t, c in zip(targets, caps)]
    order = sorted(range(len(targets)), key=lambda i: (-(targets[i] - counts[i]), i))
    rest = total - sum(counts)
    while rest > 0:
        for i in order:
            if rest == 0:
                break
            if counts[i] < caps[i]:
                counts[i] += 1
                rest -= 1
    return counts


def split_dataset(articles: Sequence[Article], spec: SplitSpec = SplitSpec()):
    """Stratified, seeded train/valid/test split.

    Split sizes follow ``spec.ratios`` (floor, then remainders by descending
    ratio). Within each split the two classes are apportioned so that every
    per-class count is within one sample of its proportional share.
    """
    if not articles:
        raise ValueError("cannot split an empty dataset")
    if any(a.veracity not in (REAL, FAKE) for a in articles):
        raise ValueError("every article needs a veracity label to be split")

    n = len(articles)
    sizes = _apportion(n, spec.ratios)
    rng = np.random.default_rng(spec.seed)
    by_class = {c: [i for i, a in enumerate(articles) if a.veracity == c] for c in (REAL, FAKE)}

    n_real = len(by_class[REAL])
    real_counts = _apportion_capped(n_real, [n_real * s / n for s in sizes], sizes)
    fake_counts = [s - r for s, r in zip(sizes, real_counts)]

    buckets: list[list[int]] = [[], [], []]
    for cls, counts in ((REAL, real_counts), (FAKE, fake_counts)):
        idx = np.array(by_class[cls], dtype=int)
        rng.shuffle(idx)
        start = 0
        for k, c in enumerate(counts):
            buckets[k].extend(idx[start:start + c].tolist())
            start += c
    train, valid, test = ([articles[i] for i in sorted(b)] for b in buckets)
    return train, valid, test
