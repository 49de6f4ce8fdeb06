"""First-order ROI statistics and gray-level co-occurrence (GLCM) features.

GLCM features are named ``{statistic}_d{distance}_a{angle}``, e.g.
``energy_d3_a135``; first-order features keep their plain names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset_io import GrayImage, RoiMask

FIRST_ORDER_NAMES = ("energy", "entropy", "kurtosis", "mean", "rms",
                     "skewness", "uniformity", "variance")
GLCM_STATISTICS = ("contrast", "correlation", "dissimilarity", "energy", "homogeneity")

# (d_row, d_col) unit offsets; rows grow downward, so 90 degrees points up
ANGLE_OFFSETS = {0: (0, 1), 45: (-1, 1), 90: (-1, 0), 135: (-1, -1)}

_CORRELATION_STD_FLOOR = 1e-12


class TextureError(ValueError):
    """Raised when an ROI cannot produce a feature (empty mask, no pixel pairs)."""


@dataclass(frozen=True)
class FirstOrderConfig:
    shift_c: float = 0.0
    entropy_epsilon: float = 2.0 ** -52
    histogram_bins: int = 256

    def __post_init__(self):
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")
        if not self.entropy_epsilon > 0:
            raise ValueError("entropy_epsilon must be positive")


@dataclass(frozen=True)
class GlcmConfig:
    levels: int = 256
    distances: tuple[int, ...] = (1, 3, 5)
    angles: tuple[int, ...] = (0, 45, 90, 135)
    symmetric: bool = True

    def __post_init__(self):
        if not 2 <= self.levels <= 256:
            raise ValueError("levels must lie in [2, 256]")
        object.__setattr__(self, "distances", tuple(int(d) for d in self.distances))
        object.__setattr__(self, "angles", tuple(int(a) for a in self.angles))
        if not self.distances or any(d < 1 for d in self.distances):
            raise ValueError("distances must be positive integers")
        if not self.angles or any(a not in ANGLE_OFFSETS for a in self.angles):
            raise ValueError(f"angles must be drawn from {sorted(ANGLE_OFFSETS)}")
        if len(set(self.distances)) != len(self.distances) or len(set(self.angles)) != len(self.angles):
            raise ValueError("distances and angles must not repeat")

    def feature_names(self) -> list[str]:
        return [glcm_feature_name(stat, d, a)
                for stat in GLCM_STATISTICS
                for d in sorted(self.distances)
                for a in sorted(self.angles)]


@dataclass(frozen=True)
class GlcmMatrix:
    """Normalized co-occurrence table plus the raw pair counts it came from."""

    counts: np.ndarray
    p: np.ndarray
    marginal_means: tuple[float, float]
    marginal_stds: tuple[float, float]

    @property
    def levels(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        names = tuple(self.names)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(names) != values.shape[0]:
            raise ValueError("names and values differ in length")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "FeatureVector":
        return cls(tuple(mapping), [float(v) for v in mapping.values()])

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError:
            raise KeyError(name) from None

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def glcm_feature_name(statistic: str, distance: int, angle: int) -> str:
    return f"{statistic}_d{distance}_a{angle}"


def canonical_sort_key(name: str):
    """GLCM names first (statistic, distance, angle), then first-order names."""
    parts = name.rsplit("_", 2)
    if len(parts) == 3 and parts[1].startswith("d") and parts[2].startswith("a"):
        try:
            return (0, parts[0], int(parts[1][1:]), int(parts[2][1:]))
        except ValueError:
            pass
    return (1, name, 0, 0)


def _check_aligned(image: GrayImage, mask: RoiMask) -> None:
    if image.pixels.shape != mask.pixels.shape:
        raise TextureError(
            f"image {image.width}x{image.height} and mask {mask.width}x{mask.height} differ in size")
    if not mask.pixels.any():
        raise TextureError("ROI mask is empty")


def extract_roi_pixels(image: GrayImage, mask: RoiMask) -> np.ndarray:
    """Intensities at in-mask positions, in row-major order."""
    _check_aligned(image, mask)
    return image.pixels[mask.pixels].copy()


def first_order_features(sample: Sequence[float] | np.ndarray,
                         config: FirstOrderConfig = FirstOrderConfig()) -> dict[str, float]:
    """Histogram and moment statistics of the ROI intensities.

    Moments are population moments (divide by N). Entropy is in bits over the
    ``histogram_bins``-bin intensity histogram, guarded by ``entropy_epsilon``.
    Skewness and kurtosis of a constant sample are reported as 0.
    """
    x = np.asarray(sample, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise TextureError("empty pixel sample")
    mean = float(x.mean())
    dev = x - mean
    m2 = float(np.mean(dev ** 2))
    m3 = float(np.mean(dev ** 3))
    m4 = float(np.mean(dev ** 4))
    shifted_sq = (x + config.shift_c) ** 2
    energy = float(shifted_sq.sum())
    rms = math.sqrt(float(shifted_sq.mean()))
    if m2 > 0.0:
        skewness = m3 / m2 ** 1.5
        kurtosis = m4 / m2 ** 2
    else:
        skewness = kurtosis = 0.0

    bins = config.histogram_bins
    idx = np.clip(np.floor(x * bins / 256.0).astype(np.int64), 0, bins - 1)
    p = np.bincount(idx, minlength=bins) / n
    p = p[p > 0]
    entropy = float(-np.sum(p * np.log2(p + config.entropy_epsilon)))
    uniformity = float(np.sum(p ** 2))
    return {
        "energy": energy,
        "entropy": entropy,
        "kurtosis": kurtosis,
        "mean": mean,
        "rms": rms,
        "skewness": skewness,
        "uniformity": uniformity,
        "variance": m2,
    }


def quantize(image: GrayImage, levels: int) -> GrayImage:
    """Map 8-bit intensities uniformly onto gray-level indices ``0..levels-1``."""
    if not 2 <= levels <= 256:
        raise ValueError("levels must lie in [2, 256]")
    return GrayImage((image.pixels.astype(np.int64) * levels) // 256)


def glcm_counts(image: GrayImage, mask: RoiMask, distance: int, angle: int,
                levels: int = 256, symmetric: bool = True) -> np.ndarray:
    """Integer co-occurrence counts for in-mask pixel pairs at one offset.

    Pixel values are gray-level indices and must be below ``levels``.
    """
    _check_aligned(image, mask)
    if angle not in ANGLE_OFFSETS:
        raise ValueError(f"unsupported angle {angle}")
    if distance < 1:
        raise ValueError("distance must be >= 1")
    dr, dc = ANGLE_OFFSETS[angle]
    dr, dc = dr * distance, dc * distance
    h, w = image.pixels.shape
    q = image.pixels.astype(np.int64)
    if int(q.max()) >= levels:
        raise TextureError(f"gray level {int(q.max())} out of range for {levels} levels; quantize first")
    m = mask.pixels
    # first pixel p1 at (r, c), second p2 at (r + dr, c + dc)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 >= r1 or c0 >= c1:
        return np.zeros((levels, levels), dtype=np.int64)
    q1 = q[r0:r1, c0:c1]
    q2 = q[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    valid = m[r0:r1, c0:c1] & m[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    flat = q1[valid] * levels + q2[valid]
    counts = np.bincount(flat, minlength=levels * levels).reshape(levels, levels)
    if symmetric:
        counts = counts + counts.T
    return counts


def compute_glcm(image: GrayImage, mask: RoiMask, distance: int, angle: int,
                 config: GlcmConfig = GlcmConfig()) -> GlcmMatrix:
    """Normalized GLCM of the ROI for one (distance, angle).

    ``image`` holds gray-level indices in ``[0, config.levels)``; 8-bit
    rasters are used as-is at the default 256 levels, otherwise pass them
    through :func:`quantize`. A pair contributes only when both of its pixels
    are inside the mask.
    """
    counts = glcm_counts(image, mask, distance, angle, config.levels, config.symmetric)
    total = int(counts.sum())
    if total == 0:
        raise TextureError(f"no in-ROI pixel pairs at distance {distance}, angle {angle}")
    p = counts / total
    levels = np.arange(config.levels, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float(levels @ px)
    mu_y = float(levels @ py)
    sd_x = math.sqrt(float(((levels - mu_x) ** 2) @ px))
    sd_y = math.sqrt(float(((levels - mu_y) ** 2) @ py))
    counts.setflags(write=False)
    p.setflags(write=False)
    return GlcmMatrix(counts, p, (mu_x, mu_y), (sd_x, sd_y))


def glcm_features(glcm: GlcmMatrix) -> dict[str, float]:
    """Contrast, correlation, dissimilarity, energy and homogeneity of a GLCM.

    Energy is the angular second moment ``sum p(i,j)^2``. Correlation is 1.0
    when the marginal standard deviations vanish.
    """
    p = glcm.p
    n = glcm.levels
    i = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange(n, dtype=np.float64)[None, :]
    diff = np.abs(i - j)
    mu_x, mu_y = glcm.marginal_means
    sd_x, sd_y = glcm.marginal_stds
    if sd_x * sd_y < _CORRELATION_STD_FLOOR:
        correlation = 1.0
    else:
        cov = float(np.sum((i - mu_x) * (j - mu_y) * p))
        correlation = min(1.0, max(-1.0, cov / (sd_x * sd_y)))
    return {
        "contrast": float(np.sum(diff ** 2 * p)),
        "correlation": correlation,
        "dissimilarity": float(np.sum(diff * p)),
        "energy": float(np.sum(p ** 2)),
        "homogeneity": float(np.sum(p / (1.0 + diff))),
    }


def feature_vector(image: GrayImage, mask: RoiMask,
                   glcm_config: GlcmConfig = GlcmConfig(),
                   fo_config: FirstOrderConfig = FirstOrderConfig(),
                   include_first_order: bool = False) -> FeatureVector:
    """The named texture feature vector of one ROI, in canonical order."""
    _check_aligned(image, mask)
    levels_image = image if glcm_config.levels == 256 else quantize(image, glcm_config.levels)
    per_offset = {}
    for d in sorted(glcm_config.distances):
        for a in sorted(glcm_config.angles):
            per_offset[d, a] = glcm_features(compute_glcm(levels_image, mask, d, a, glcm_config))
    names, values = [], []
    for stat in GLCM_STATISTICS:
        for (d, a), feats in per_offset.items():
            names.append(glcm_feature_name(stat, d, a))
            values.append(feats[stat])
    if include_first_order:
        fo = first_order_features(extract_roi_pixels(image, mask), fo_config)
        names.extend(FIRST_ORDER_NAMES)
        values.extend(fo[k] for k in FIRST_ORDER_NAMES)
    return FeatureVector(tuple(names), values)


def stack(vectors: Iterable[FeatureVector], names: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Stack vectors into an ``(n_cases, n_features)`` matrix aligned by name."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("no feature vectors to stack")
    names = list(names if names is not None else vectors[0].names)
    rows = []
    for vec in vectors:
        if set(vec.names) != set(names) or len(vec.names) != len(names):
            raise ValueError("feature vectors carry different feature names")
        lookup = dict(zip(vec.names, vec.values))
        rows.append([lookup[n] for n in names])
    return names, np.asarray(rows, dtype=np.float64)
