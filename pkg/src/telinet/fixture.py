"""Synthetic dataset in the on-disk layout, for tests and demos.

COVID slices are bright and non-COVID slices are dark: every image has one
constant intensity drawn from a class-specific range, so the two classes are
trivially separable by mean intensity.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
from PIL import Image

COVID_LEVELS = (150, 230)
NONCOVID_LEVELS = (20, 100)

# (series id, true label, slice count)
TEST_SERIES = (
    ("series_a", 1, 5),
    ("series_b", 0, 6),
    ("series_c", 1, 4),
    ("series_d", 0, 3),
    ("series_e", 1, 1),
)


def _write(path: Path, level: int, size: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size), level, dtype=np.uint8), mode="L").save(path)


def _level(rng: np.random.Generator, label: int) -> int:
    lo, hi = COVID_LEVELS if label else NONCOVID_LEVELS
    return int(rng.integers(lo, hi + 1))


def make_fixture(out: str | os.PathLike, n_train: int = 64, n_validation: int = 32,
                 size: int = 64, seed: int = 0, slices_per_series: int = 4) -> Path:
    """Write a balanced two-class dataset under ``out``.

    ``train`` holds flat class folders; ``validation`` groups each class into
    series sub-folders of ``slices_per_series`` slices; ``test`` holds
    unlabeled series folders whose ground truth goes to
    ``<out>/test_labels.csv`` (outside the test tree).
    """
    out = Path(out)
    rng = np.random.default_rng(seed)
    names = {1: "covid", 0: "non-covid"}

    for label in (1, 0):
        for i in range(n_train // 2):
            _write(out / "train" / names[label] / f"{names[label]}_{i:04d}.png", _level(rng, label), size)
    for label in (1, 0):
        for i in range(n_validation // 2):
            series = f"{names[label]}_series_{i // slices_per_series:02d}"
            _write(out / "validation" / names[label] / series / f"slice_{i % slices_per_series:03d}.png",
                   _level(rng, label), size)

    with open(out / "test_labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "label"])
        for series_id, label, count in TEST_SERIES:
            for j in range(count):
                _write(out / "test" / series_id / f"slice_{j:03d}.png", _level(rng, label), size)
            writer.writerow([series_id, label])
    return out
