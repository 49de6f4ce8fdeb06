"""Image/mask loading, dataset enumeration and the stratified train/test split.

The expected dataset layout is the one the public breast ultrasound set is
distributed in::

    root/
      benign/     foo.png  foo_mask.png  [foo_mask_1.png ...]
      malignant/  bar.png  bar_mask.png
      normal/     ...      (ignored)
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

BENIGN = "benign"
MALIGNANT = "malignant"
LABELS = (BENIGN, MALIGNANT)

_MASK_RE = re.compile(r"^(?P<stem>.+)_mask(?:_\d+)?$")


class DatasetError(Exception):
    """Raised for unreadable images or an unusable dataset directory."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster stored as a read-only ``(height, width)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D raster, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValueError("intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the intensities."""
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class RoiMask:
    """Boolean region-of-interest raster aligned with a :class:`GrayImage`."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2-D raster, got shape {px.shape}")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def data(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def union(self, other: "RoiMask") -> "RoiMask":
        if self.pixels.shape != other.pixels.shape:
            raise ValueError("cannot union masks of different sizes")
        return RoiMask(self.pixels | other.pixels)


@dataclass(frozen=True)
class Case:
    """One labeled image with its (possibly several) ROI mask files."""

    image_path: Path
    mask_paths: tuple[Path, ...]
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if not self.mask_paths:
            raise ValueError("a case needs at least one mask file")

    @property
    def mask_path(self) -> Path:
        return self.mask_paths[0]

    @property
    def case_id(self) -> str:
        return f"{self.label}/{self.image_path.stem}"


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie strictly between 0 and 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def _to_gray(arr: np.ndarray, mode: str) -> np.ndarray:
    if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
        wide = arr.astype(np.int64)
        if wide.max(initial=0) > 255:
            # 16-bit raster: rescale to 8 bits with round-half-up
            wide = (wide * 255 + 32767) // 65535
        return np.clip(wide, 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        return arr.astype(np.uint8)
    rgb = arr[..., :3].astype(np.int64)
    # integer form of round(0.299 R + 0.587 G + 0.114 B) with halves rounded up
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return luma.astype(np.uint8)


def _read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA")
                mode = "RGBA"
            elif mode == "1":
                im = im.convert("L")
                mode = "L"
            elif mode in ("LA", "La"):
                im = im.getchannel(0)
                mode = "L"
            elif mode not in ("L", "RGB", "RGBA", "I", "I;16", "I;16B", "I;16L", "I;16N"):
                im = im.convert("RGB")
                mode = "RGB"
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DatasetError(f"image {path} has a zero dimension")
    return _to_gray(arr, mode)


def load_image(path) -> GrayImage:
    """Read a PNG (or any Pillow-decodable raster) as 8-bit grayscale.

    Color images are reduced with the integer-rounded luma combination
    ``0.299 R + 0.587 G + 0.114 B``; alpha is ignored.
    """
    return GrayImage(_read_gray(path))


def load_mask(path) -> RoiMask:
    """Read a mask raster; a pixel is inside the ROI iff its gray value > 127.

    An all-background mask loads fine but is rejected at feature extraction.
    """
    return RoiMask(_read_gray(path) > 127)


def load_case_mask(case: Case) -> RoiMask:
    """Union of every mask file annotated for ``case``."""
    mask = load_mask(case.mask_paths[0])
    for extra in case.mask_paths[1:]:
        mask = mask.union(load_mask(extra))
    return mask


def find_cases(root) -> tuple[list[Case], list[Path]]:
    """Enumerate ``(cases, images_without_mask)`` under ``root``.

    Cases are sorted by image path. Unlike :func:`scan_dataset` this does not
    reject an empty result.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    cases: list[Case] = []
    skipped: list[Path] = []
    for label in LABELS:
        class_dir = root / label
        if not class_dir.is_dir():
            continue
        images: dict[str, Path] = {}
        masks: dict[str, list[Path]] = {}
        for path in class_dir.iterdir():
            if path.suffix.lower() != ".png" or not path.is_file():
                continue
            m = _MASK_RE.match(path.stem)
            if m:
                masks.setdefault(m.group("stem"), []).append(path)
            else:
                images[path.stem] = path
        for stem, image_path in images.items():
            if stem not in masks:
                skipped.append(image_path)
                continue
            mask_paths = tuple(sorted(masks[stem], key=lambda p: p.as_posix()))
            cases.append(Case(image_path, mask_paths, label))
    cases.sort(key=lambda c: c.image_path.as_posix())
    skipped.sort(key=lambda p: p.as_posix())
    return cases, skipped


def scan_dataset(root) -> list[Case]:
    """List the benign and malignant cases under ``root``, sorted by image path.

    ``normal/`` is ignored. Images without a ``<stem>_mask.png`` companion are
    skipped and reported through a single warning.
    """
    cases, skipped = find_cases(root)
    if skipped:
        logger.warning("skipped %d image(s) without a mask", len(skipped))
    if not cases:
        raise DatasetError(f"no benign/malignant cases found under {root}")
    return cases


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: Sequence[str], test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[list[int], list[int]]:
    """Index-level stratified split; returns sorted ``(train_idx, test_idx)``.

    Per class, ``round(test_fraction * class_size)`` items go to the test
    side, chosen by a permutation drawn from ``seed``.
    """
    cfg = SplitConfig(test_fraction, seed)
    labels = list(labels)
    rng = np.random.default_rng(cfg.seed)
    test: list[int] = []
    for label in LABELS:
        members = [i for i, lab in enumerate(labels) if lab == label]
        if not members:
            raise DatasetError(f"cannot stratify: no {label} cases")
        n_test = _round_half_up(cfg.test_fraction * len(members))
        order = rng.permutation(len(members))
        test.extend(members[k] for k in order[:n_test])
    unknown = set(labels) - set(LABELS)
    if unknown:
        raise DatasetError(f"unknown labels {sorted(unknown)}")
    test_set = set(test)
    train_idx = [i for i in range(len(labels)) if i not in test_set]
    return train_idx, sorted(test_set)


def split_dataset(cases: Iterable[Case],
                  config: SplitConfig = SplitConfig()) -> tuple[list[Case], list[Case]]:
    """Deterministic stratified ``(train, test)`` partition of ``cases``."""
    cases = list(cases)
    train_idx, test_idx = stratified_split([c.label for c in cases],
                                           config.test_fraction, config.seed)
    return [cases[i] for i in train_idx], [cases[i] for i in test_idx]
