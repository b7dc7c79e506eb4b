"""Dataset ingestion, splitting, and the merge operations used by the replay pipeline.

Images are stored as single-channel float arrays in [0, 1]; the GAN side of the
pipeline works in [-1, 1] via :func:`to_gan_range` / :func:`from_gan_range`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".tif", ".tiff"}

RANGE_TOL = 1e-6


class DataError(ValueError):
    """Raised for malformed dataset trees, samples, or range violations."""


class EmotionClass(IntEnum):
    """The seven emotion classes, with a fixed id mapping shared by all datasets."""

    FEAR = 0
    ANGER = 1
    HAPPINESS = 2
    SADNESS = 3
    DISGUST = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "EmotionClass":
        try:
            return cls[name.upper()]
        except KeyError:
            raise DataError(f"unknown emotion class name: {name!r}") from None


EMOTION_NAMES = tuple(c.label for c in EmotionClass)
NUM_CLASSES = len(EmotionClass)


@dataclass(eq=False)
class LabeledImage:
    """One grayscale image plus its emotion class label.

    ``pixels`` is an HxW float32 array with all values finite and in [0, 1].
    ``source_id`` is an opaque provenance string (file path or generator tag).
    """

    pixels: np.ndarray
    label: EmotionClass
    source_id: str

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise DataError(f"image {self.source_id!r} must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"image {self.source_id!r} contains non-finite pixels")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
            raise DataError(f"image {self.source_id!r} has pixels outside [0, 1]: [{lo}, {hi}]")
        self.label = EmotionClass(self.label)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(eq=False)
class WeightedSample:
    """A labeled image plus a training weight in (0, 1].

    Real samples always carry weight 1.0; synthetic samples carry the
    classifier confidence assigned by the quality-assurance filter.
    """

    image: LabeledImage
    weight: float = 1.0

    def __post_init__(self) -> None:
        self.weight = float(self.weight)
        if not (0.0 < self.weight <= 1.0):
            raise DataError(f"sample weight must be in (0, 1], got {self.weight}")


@dataclass(eq=False)
class Dataset:
    """A named, ordered, immutable collection of weighted samples for one split."""

    name: str
    samples: tuple[WeightedSample, ...]
    split: str = "all"

    def __post_init__(self) -> None:
        self.samples = tuple(self.samples)
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) > 1:
            raise DataError(f"dataset {self.name!r} mixes image shapes: {sorted(shapes)}")
        if self.split not in ("train", "test", "all"):
            raise DataError(f"unknown split tag: {self.split!r}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_size(self) -> int | None:
        if not self.samples:
            return None
        h, w = self.samples[0].image.shape
        return h if h == w else None

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[int(s.image.label)] = counts.get(int(s.image.label), 0) + 1
        return counts

    def images_array(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack([s.image.pixels for s in self.samples]).astype(np.float32)

    def labels_array(self) -> np.ndarray:
        return np.asarray([int(s.image.label) for s in self.samples], dtype=np.int64)

    def weights_array(self) -> np.ndarray:
        return np.asarray([s.weight for s in self.samples], dtype=np.float32)

    def class_slice(self, label: EmotionClass | int) -> "Dataset":
        """Samples of a single class, preserving order."""
        label = EmotionClass(label)
        subset = tuple(s for s in self.samples if s.image.label == label)
        return Dataset(name=f"{self.name}/{label.label}", samples=subset, split=self.split)


@dataclass(eq=False)
class DomainSplits:
    """Train/test splits of one dataset, as consumed by the pipeline stages."""

    name: str
    train: Dataset
    test: Dataset


def load_image_dataset(root_path: str | Path, image_size: int, name: str) -> Dataset:
    """Load a ``<root>/<class_name>/<image files>`` tree into a Dataset.

    Every readable image is resized to ``image_size`` x ``image_size``,
    converted to single-channel, scaled to [0, 1], and given weight 1.0.
    Sample order is deterministic (sorted by path).
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    missing = [c.label for c in EmotionClass if not (root / c.label).is_dir()]
    if missing:
        raise DataError(f"missing classes: {', '.join(missing)}")

    samples: list[WeightedSample] = []
    for cls in EmotionClass:
        class_dir = root / cls.label
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"no images found for class '{cls.label}' in {class_dir}")
        for path in files:
            try:
                with Image.open(path) as img:
                    gray = img.convert("L").resize((image_size, image_size), Image.BILINEAR)
                    pixels = np.asarray(gray, dtype=np.float32) / 255.0
            except DataError:
                raise
            except Exception as exc:
                raise DataError(f"unreadable image file {path}: {exc}") from exc
            samples.append(WeightedSample(LabeledImage(pixels, cls, str(path)), 1.0))

    samples.sort(key=lambda s: s.image.source_id)
    return Dataset(name=name, samples=tuple(samples), split="all")


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; each class contributes ceil(n_c * fraction) test samples.

    Deterministic for a given seed; membership varies with the seed while
    per-class counts stay fixed. Sample order within each split follows the
    parent dataset's order.
    """
    if not (0.0 < test_fraction < 1.0):
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    counts = ds.class_counts()
    small = sorted(EmotionClass(c).label for c, n in counts.items() if n < 2)
    if small:
        raise DataError(f"classes with fewer than 2 samples cannot be split: {', '.join(small)}")

    rng = np.random.default_rng(seed)
    test_indices: set[int] = set()
    for cls in sorted(counts):
        idxs = [i for i, s in enumerate(ds.samples) if int(s.image.label) == cls]
        n_test = math.ceil(len(idxs) * test_fraction)
        perm = rng.permutation(len(idxs))
        test_indices.update(idxs[j] for j in perm[:n_test])

    train = tuple(s for i, s in enumerate(ds.samples) if i not in test_indices)
    test = tuple(s for i, s in enumerate(ds.samples) if i in test_indices)
    return (Dataset(ds.name, train, "train"), Dataset(ds.name, test, "test"))


def unify_datasets(target: Dataset, synthetic: Dataset) -> Dataset:
    """Concatenate two datasets, preserving each sample's weight.

    The result's name records both parents. Inputs are never mutated.
    """
    if target.samples and synthetic.samples:
        if target.samples[0].image.shape != synthetic.samples[0].image.shape:
            raise DataError(
                f"image size mismatch: {target.name!r} has {target.samples[0].image.shape}, "
                f"{synthetic.name!r} has {synthetic.samples[0].image.shape}"
            )
    return Dataset(
        name=f"{target.name}+{synthetic.name}",
        samples=target.samples + synthetic.samples,
        split=target.split,
    )


def concat_datasets(datasets: Sequence[Dataset]) -> Dataset:
    """Left fold of :func:`unify_datasets` over two or more datasets."""
    if not datasets:
        raise DataError("cannot concatenate an empty list of datasets")
    out = datasets[0]
    for ds in datasets[1:]:
        out = unify_datasets(out, ds)
    return out


def to_gan_range(images: np.ndarray) -> np.ndarray:
    """Affine map [0, 1] -> [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.size and (arr.min() < -RANGE_TOL or arr.max() > 1.0 + RANGE_TOL):
        raise DataError(f"to_gan_range input outside [0, 1]: [{arr.min()}, {arr.max()}]")
    return np.clip(arr * 2.0 - 1.0, -1.0, 1.0)


def from_gan_range(images: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 1]; inverse of :func:`to_gan_range`."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.size and (arr.min() < -1.0 - RANGE_TOL or arr.max() > 1.0 + RANGE_TOL):
        raise DataError(f"from_gan_range input outside [-1, 1]: [{arr.min()}, {arr.max()}]")
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def manifest_csv(ds: Dataset) -> str:
    """CSV manifest with columns ``source_id,class_id,weight,split``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source_id", "class_id", "weight", "split"])
    for s in ds.samples:
        writer.writerow([s.image.source_id, int(s.image.label), repr(s.weight), ds.split])
    return buf.getvalue()


def manifest_digest(ds: Dataset) -> str:
    return hashlib.sha256(manifest_csv(ds).encode("utf-8")).hexdigest()


def write_manifest(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_csv(ds), encoding="utf-8")
    return path
