"""Labeled datasets from ``<root>/<source>/{0_real,1_fake}`` trees.

Samples are ordered lexicographically by path, splits and shuffles are seeded,
and every image is cropped before NPR extraction so the grid stays aligned
with the crop window.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import IMAGE_SUFFIXES, ImageDecodeError, as_image, read_image
from .npr import GridSpec, extract_npr

logger = logging.getLogger(__name__)

DEFAULT_CROP = 128
CLASS_LABELS = {"0_real": 0, "1_fake": 1}
REPRESENTATIONS = ("npr", "pixels")


class DatasetError(ValueError):
    """The directory tree does not form a usable labeled dataset."""


@dataclass(frozen=True)
class Sample:
    path: Path
    label: int
    source_name: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    seed: int

    def __post_init__(self):
        overlap = {s.path for s in self.train} & {s.path for s in self.val}
        if overlap:
            raise DatasetError(f"{len(overlap)} samples are in both train and val")

    def to_manifest(self) -> dict:
        return {
            "seed": int(self.seed),
            "train": [str(s.path) for s in self.train],
            "val": [str(s.path) for s in self.val],
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_manifest(), indent=2) + "\n")


def _decodable(path: Path) -> bool:
    try:
        read_image(path)
    except ImageDecodeError as exc:
        warnings.warn(f"skipping undecodable file {path}: {exc}", stacklevel=3)
        return False
    return True


def source_dirs(root) -> list:
    """Sub-directories of ``root`` holding at least one class directory."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    return sorted(d for d in root.iterdir()
                  if d.is_dir() and any((d / c).is_dir() for c in CLASS_LABELS))


def load_source(source_dir, *, check_decode: bool = True) -> list:
    """Samples of one source; an empty or missing class directory is an error."""
    source_dir = Path(source_dir)
    samples = []
    for cls, label in CLASS_LABELS.items():
        cdir = source_dir / cls
        if not cdir.is_dir():
            raise DatasetError(f"{source_dir.name}: class directory {cls} is missing")
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if check_decode:
            files = [p for p in files if _decodable(p)]
        if not files:
            raise DatasetError(f"{source_dir.name}: class directory {cls} is empty")
        samples.extend(Sample(p, label, source_dir.name) for p in files)
    return samples


def load_dataset(root, *, check_decode: bool = True) -> list:
    """Every decodable PNG/JPEG under ``<root>/<source>/{0_real,1_fake}``.

    Other directories and files are ignored. Samples come back sorted by path.
    """
    sources = source_dirs(root)
    if not sources:
        raise DatasetError(f"{root} contains no <source>/{{0_real,1_fake}} directories")
    samples = []
    for sdir in sources:
        samples.extend(load_source(sdir, check_decode=check_decode))
    samples.sort(key=lambda s: str(s.path))
    for (src, label), n in sorted(class_counts(samples).items()):
        logger.info("source %s class %d: %d images", src, label, n)
    return samples


def class_counts(samples) -> Counter:
    return Counter((s.source_name, s.label) for s in samples)


def split_samples(samples, val_fraction: float, seed: int) -> DatasetSplit:
    """Seeded split of the path-sorted samples; both parts keep path order."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    ordered = sorted(samples, key=lambda s: str(s.path))
    n_val = int(round(len(ordered) * val_fraction))
    if n_val < 1 or n_val >= len(ordered):
        raise DatasetError(f"cannot split {len(ordered)} samples with val_fraction={val_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(ordered) if i not in val_idx]
    val = [s for i, s in enumerate(ordered) if i in val_idx]
    return DatasetSplit(train, val, seed)


# --- preprocessing -------------------------------------------------------

@dataclass(frozen=True)
class CenterCrop:
    pass


@dataclass(frozen=True)
class RandomCrop:
    seed: int


@dataclass
class Preprocessed:
    image: np.ndarray
    upscaled: bool
    offset: tuple


def _nearest_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return image[rows][:, cols]


def preprocess_ex(image, crop: int = DEFAULT_CROP, mode=CenterCrop(), *, allow_upscale: bool = True,
                  grid_l: int = 2) -> Preprocessed:
    """Crop to ``crop x crop x 3`` and report whether upscaling was needed.

    Grayscale is replicated to three channels. Images smaller than ``crop``
    are nearest-upscaled on the shorter side (flagged, since resampling
    changes NPR statistics) unless ``allow_upscale`` is False.
    """
    if crop < 1 or crop % grid_l:
        raise ValueError(f"crop {crop} must be a positive multiple of {grid_l}")
    img = as_image(image)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    upscaled = False
    if min(h, w) < crop:
        if not allow_upscale:
            raise ValueError(f"image {h}x{w} is smaller than crop {crop}")
        scale = crop / min(h, w)
        nh, nw = max(crop, int(np.ceil(h * scale))), max(crop, int(np.ceil(w * scale)))
        img = _nearest_resize(img, nh, nw)
        h, w = nh, nw
        upscaled = True
    if isinstance(mode, RandomCrop):
        rng = np.random.default_rng(mode.seed)
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
    elif isinstance(mode, CenterCrop):
        top, left = (h - crop) // 2, (w - crop) // 2
    else:
        raise TypeError(f"unknown crop mode {mode!r}")
    out = np.ascontiguousarray(img[top:top + crop, left:left + crop])
    return Preprocessed(out, upscaled, (top, left))


def preprocess(image, crop: int = DEFAULT_CROP, mode=CenterCrop(), *, allow_upscale: bool = True) -> np.ndarray:
    return preprocess_ex(image, crop, mode, allow_upscale=allow_upscale).image


def crop_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([seed, epoch, index]).integers(0, 2**63 - 1))


def features_for(image: np.ndarray, grid: GridSpec, representation: str = "npr") -> np.ndarray:
    """(3, H, W) classifier input for a preprocessed image."""
    if representation == "npr":
        data = extract_npr(image, grid).data
    elif representation == "pixels":
        data = image
    else:
        raise ValueError(f"representation must be one of {REPRESENTATIONS}")
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def _load_features(sample: Sample, grid, crop, mode, representation):
    try:
        image = preprocess(read_image(sample.path), crop, mode)
        return features_for(image, grid, representation)
    except (ImageDecodeError, ValueError) as exc:
        raise type(exc)(f"{sample.path}: {exc}") from exc


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(samples, grid: GridSpec = GridSpec(), batch_size: int = 32, seed: int = 0, epoch: int = 0,
                 *, crop: int = DEFAULT_CROP, random_crop: bool = False, representation: str = "npr",
                 shuffle: bool = True, jobs: int = 1):
    """Yield ``(features NCHW float32, labels int64)`` batches for one epoch.

    The shuffle order depends only on ``(seed, epoch)``; the final partial
    batch is kept. Random crops are seeded per ``(seed, epoch, sample index)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("make_batches needs at least one sample")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(samples), seed, epoch) if shuffle else np.arange(len(samples))

    def load(i):
        mode = RandomCrop(crop_seed(seed, epoch, int(i))) if random_crop else CenterCrop()
        return _load_features(samples[i], grid, crop, mode, representation)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            feats = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            labels = np.array([samples[i].label for i in idx], dtype=np.int64)
            yield np.stack(feats).astype(np.float32, copy=False), labels
    finally:
        if pool:
            pool.shutdown()


class FeatureDataset:
    """Center-cropped features for a fixed sample list, computed once.

    Exposes the ``batches``/``labels`` interface the training loop expects.
    """

    def __init__(self, samples, grid: GridSpec = GridSpec(), *, crop: int = DEFAULT_CROP,
                 representation: str = "npr", jobs: int = 1):
        self.samples = list(samples)
        if not self.samples:
            raise ValueError("dataset is empty")
        self.grid = grid
        self.crop = crop
        self.representation = representation
        chunks = [x for x, _ in make_batches(self.samples, grid, 256, shuffle=False, crop=crop,
                                             representation=representation, jobs=jobs)]
        self.x = np.concatenate(chunks)
        self.y = np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def labels(self):
        return self.y

    def __len__(self):
        return len(self.samples)

    def batches(self, batch_size, seed=0, epoch=0, shuffle=True):
        order = epoch_permutation(len(self.y), seed, epoch) if shuffle else np.arange(len(self.y))
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            yield self.x[sel], self.y[sel]
