"""Folder-per-class dataset discovery, image loading and mini-batching.

Expected layout::

    <root>/train/{covid,non-covid}/**/*.png|jpg|jpeg
    <root>/validation/{covid,non-covid}/**/*.png|jpg|jpeg
    <root>/test/<series_id>/*.png|jpg|jpeg

Images nested one level below a class folder (``covid/<series>/slice.png``)
are tagged with that series id, which enables series-level validation.
"""

from __future__ import annotations

import logging
import os
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg"})
COVID, NON_COVID = 1, 0
DEFAULT_CLASS_DIRS = {COVID: "covid", NON_COVID: "non-covid"}


class DatasetError(Exception):
    """Missing folders, empty splits and undecodable images."""


class Sample(NamedTuple):
    path: Path
    label: int
    series_id: str | None = None


@dataclass(frozen=True)
class DatasetIndex:
    split: str
    entries: tuple[Sample, ...]

    @property
    def class_counts(self) -> dict[str, int]:
        covid = sum(1 for e in self.entries if e.label == COVID)
        return {"covid": covid, "non-covid": len(self.entries) - covid}

    @property
    def has_series(self) -> bool:
        return all(e.series_id is not None for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SeriesIndex:
    series_id: str
    slice_paths: tuple[Path, ...]


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray
    paths: tuple[Path, ...]


def _is_image(path: Path) -> bool:
    return path.suffix.lower() in IMAGE_EXTENSIONS


def _find_child(parent: Path, name: str) -> Path | None:
    wanted = name.lower()
    for child in sorted(parent.iterdir()):
        if child.is_dir() and child.name.lower() == wanted:
            return child
    return None


def _walk_images(folder: Path) -> list[Path]:
    found = []
    for dirpath, dirnames, filenames in os.walk(folder):
        dirnames.sort()
        for fname in sorted(filenames):
            path = Path(dirpath) / fname
            if _is_image(path):
                found.append(path)
            else:
                logger.warning("skipping non-image file %s", path)
    return found


def scan_split(root: str | os.PathLike, split: str,
               class_dirs: dict[int, str] | None = None) -> DatasetIndex:
    """Enumerate the labeled images of one split, sorted by path."""
    class_dirs = class_dirs or DEFAULT_CLASS_DIRS
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"split folder not found: {split_dir}")
    entries: list[Sample] = []
    for label in (COVID, NON_COVID):
        class_dir = _find_child(split_dir, class_dirs[label])
        if class_dir is None:
            raise DatasetError(f"class folder {class_dirs[label]!r} not found in {split_dir}")
        for path in _walk_images(class_dir):
            parts = path.relative_to(class_dir).parts
            series = "/".join(parts[:-1]) or None
            entries.append(Sample(path, label, series))
    if not entries:
        raise DatasetError(f"no images found in split folder {split_dir}")
    entries.sort(key=lambda e: str(e.path))
    return DatasetIndex(split, tuple(entries))


def scan_test_series(root: str | os.PathLike) -> list[SeriesIndex]:
    """One :class:`SeriesIndex` per folder under ``root`` that holds slices.

    Folders containing only sub-folders (e.g. test subsets) are descended
    into; a folder with neither images nor sub-folders is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"test folder not found: {root}")
    series: list[SeriesIndex] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        here = Path(dirpath)
        slices = tuple(here / f for f in sorted(filenames) if _is_image(here / f))
        if here == root:
            continue
        if slices:
            series.append(SeriesIndex(here.relative_to(root).as_posix(), slices))
        elif not dirnames:
            raise DatasetError(f"empty series folder: {here}")
    if not series:
        raise DatasetError(f"no series folders found in {root}")
    series.sort(key=lambda s: s.series_id)
    return series


def load_image(path: str | os.PathLike, target_size: int = 256, channels: int = 1) -> np.ndarray:
    """Decode, convert to grayscale/RGB, bilinear-resize, and rescale to [0, 1].

    Returns a float32 array of shape (channels, target_size, target_size).
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            if img.size != (target_size, target_size):
                img = img.resize((target_size, target_size), Image.Resampling.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    arr = arr / np.float32(255.0)
    return arr[None] if channels == 1 else np.ascontiguousarray(arr.transpose(2, 0, 1))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` determined by ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


class ImageLoader:
    """Decodes lists of paths into stacked batches, optionally on threads.

    Output order never depends on the number of workers.
    """

    def __init__(self, target_size: int = 256, channels: int = 1, workers: int = 0,
                 prefetch: int = 1) -> None:
        self.target_size = target_size
        self.channels = channels
        self.workers = workers
        self.prefetch = max(0, prefetch)

    def _one(self, path: Path) -> np.ndarray:
        return load_image(path, self.target_size, self.channels)

    def load(self, paths: Sequence[Path]) -> np.ndarray:
        return np.stack([self._one(p) for p in paths])

    def iter_batches(self, groups: Sequence[Sequence[Path]]) -> Iterator[np.ndarray]:
        if self.workers <= 0:
            for group in groups:
                yield self.load(group)
            return
        with ThreadPoolExecutor(self.workers) as pool:
            pending: deque[list[Future]] = deque()
            it = iter(groups)
            for group in it:
                pending.append([pool.submit(self._one, p) for p in group])
                if len(pending) > self.prefetch:
                    break
            while pending:
                futures = pending.popleft()
                nxt = next(it, None)
                if nxt is not None:
                    pending.append([pool.submit(self._one, p) for p in nxt])
                yield np.stack([f.result() for f in futures])


def batches(index: DatasetIndex, batch_size: int, seed: int, epoch: int,
            loader: ImageLoader | None = None, shuffle: bool = True) -> Iterator[Batch]:
    """Mini-batches over ``index``; shuffled per ``(seed, epoch)`` unless ``shuffle`` is off.

    Every entry appears exactly once; only the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    loader = loader or ImageLoader()
    n = len(index.entries)
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    groups = [[index.entries[i] for i in order[s:s + batch_size]] for s in range(0, n, batch_size)]
    stacks = loader.iter_batches([[e.path for e in g] for g in groups])
    for group, images in zip(groups, stacks):
        labels = np.array([[e.label] for e in group], dtype=np.float32)
        yield Batch(images, labels, tuple(e.path for e in group))
