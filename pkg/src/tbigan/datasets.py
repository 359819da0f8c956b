"""Dataset ingestion and deterministic splitting.

Supports the two 32x32 RGB benchmarks (CIFAR10 from its standard binary
batches, SVHN from the cropped-digits ``.mat`` containers) plus a small
synthetic shape dataset used for fast end-to-end runs. All images are
float32 arrays of shape (N, C, H, W) scaled to [0, 1]; the generator ends
in a sigmoid, so no [-1, 1] rescaling happens anywhere.

Every split/selection operation here is a pure function of its inputs and
an explicit seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestionError, SelectionError, SplitError, UsageError

DATASET_NAMES = ("cifar10", "svhn", "synthetic")
VALIDATION_PER_CLASS = 50

_CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST_FILE = "test_batch.bin"
_CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class DatasetSplit:
    """Train/validation/test arrays for one dataset.

    Images are (N, C, H, W) float32 in [0, 1]; labels are int64 class ids
    in [0, class_count).
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    validation_images: np.ndarray
    validation_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_count: int
    image_shape: tuple[int, int, int]

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            images = getattr(self, f"{name}_images")
            labels = getattr(self, f"{name}_labels")
            if images.ndim != 4 or images.shape[1:] != self.image_shape:
                raise ContractError(f"{name} images have shape {images.shape}, expected (N,) + {self.image_shape}")
            if labels.shape != (images.shape[0],):
                raise ContractError(f"{name} labels misaligned with images")
            if images.size and (images.min() < 0.0 or images.max() > 1.0):
                raise ContractError(f"{name} pixel values outside [0, 1]")
            if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ContractError(f"{name} labels outside [0, {self.class_count})")

    @property
    def train_size(self) -> int:
        return self.train_images.shape[0]


@dataclass
class LabeledIndex:
    """Per-class indices into the train split that carry labels.

    Regenerating with the same (split, n_per_class, seed) yields identical
    indices; the flattened view is ordered by ascending train index so that
    downstream tie-breaking is well defined.
    """

    per_class_indices: dict[int, np.ndarray]
    n_per_class: int
    seed: int
    _flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for cls, idx in self.per_class_indices.items():
            if len(idx) != self.n_per_class:
                raise ContractError(f"class {cls} has {len(idx)} labeled indices, expected {self.n_per_class}")
        self._flat = np.sort(np.concatenate(list(self.per_class_indices.values())))

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.per_class_indices)

    def flattened(self) -> np.ndarray:
        """All labeled train indices, ascending."""
        return self._flat.copy()

    def total(self) -> int:
        return len(self._flat)


def load_dataset(name: str, root: str | os.PathLike | None = None) -> DatasetSplit:
    """Load one of the supported datasets and carve out the validation split.

    ``root`` is the directory holding the published archive files; it may
    also be the directory one level above the conventional archive
    subdirectory. For ``synthetic`` the root is ignored.
    """
    if name == "cifar10":
        return _load_cifar10(_resolve_root(root))
    if name == "svhn":
        return _load_svhn(_resolve_root(root))
    if name == "synthetic":
        return synthetic_shapes(class_count=3, per_class=200, image_size=16, seed=0)
    raise UsageError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")


def _resolve_root(root) -> Path:
    if root is None:
        root = os.environ.get("TBIGAN_DATA_ROOT", "")
    if not root:
        raise UsageError("no data root given; pass --data-root or set TBIGAN_DATA_ROOT")
    return Path(root)


def _find_archive(root: Path, filename: str, subdirs: tuple[str, ...]) -> Path:
    candidates = [root / filename] + [root / sub / filename for sub in subdirs]
    for path in candidates:
        if path.is_file():
            return path
    raise IngestionError(f"missing archive file {filename!r} under {root}")


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    # Record layout: 1 label byte + 3072 pixel bytes (R, G, B planes).
    # Record count is derived from the file size rather than hardcoded to
    # 10000 so truncation is caught and small fixture files stay loadable.
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD_BYTES != 0:
        raise IngestionError(f"corrupt CIFAR10 batch {path}: {raw.size} bytes is not a whole number of records")
    records = raw.reshape(-1, _CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar10(root: Path) -> DatasetSplit:
    subdirs = ("cifar-10-batches-bin", "cifar10")
    train_parts = [_read_cifar_batch(_find_archive(root, f, subdirs)) for f in _CIFAR_TRAIN_FILES]
    test_images, test_labels = _read_cifar_batch(_find_archive(root, _CIFAR_TEST_FILE, subdirs))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    if labels.max() > 9:
        raise IngestionError(f"CIFAR10 labels exceed 9 under {root}; archive is corrupt")
    (train_images, train_labels), (val_images, val_labels) = make_validation_split(images, labels)
    return DatasetSplit(
        train_images=train_images,
        train_labels=train_labels,
        validation_images=val_images,
        validation_labels=val_labels,
        test_images=test_images,
        test_labels=test_labels,
        class_count=10,
        image_shape=(3, 32, 32),
    )


def _load_svhn(root: Path) -> DatasetSplit:
    # Standard train split only; the 'extra' set is not used.
    from scipy.io import loadmat

    subdirs = ("svhn",)
    paths = [_find_archive(root, f, subdirs) for f in ("train_32x32.mat", "test_32x32.mat")]
    arrays = []
    for path in paths:
        try:
            mat = loadmat(path)
            x, y = mat["X"], mat["y"]
        except Exception as exc:
            raise IngestionError(f"corrupt SVHN archive {path}: {exc}") from exc
        images = np.transpose(x, (3, 2, 0, 1)).astype(np.float32) / 255.0
        labels = y.reshape(-1).astype(np.int64)
        labels[labels == 10] = 0  # digit 0 is stored as label 10
        arrays.append((images, labels))
    (train_images, train_labels), (val_images, val_labels) = make_validation_split(*arrays[0])
    return DatasetSplit(
        train_images=train_images,
        train_labels=train_labels,
        validation_images=val_images,
        validation_labels=val_labels,
        test_images=arrays[1][0],
        test_labels=arrays[1][1],
        class_count=10,
        image_shape=(3, 32, 32),
    )


def make_validation_split(
    images: np.ndarray, labels: np.ndarray, per_class: int = VALIDATION_PER_CLASS
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Split off the last ``per_class`` examples of each class.

    "Last" is taken in the dataset's native file order. Both returned parts
    preserve the original relative order; together they partition the input.
    """
    if images.shape[0] != labels.shape[0]:
        raise ContractError("images and labels misaligned")
    validation_mask = np.zeros(labels.shape[0], dtype=bool)
    for cls in np.unique(labels):
        positions = np.flatnonzero(labels == cls)
        if len(positions) < per_class:
            raise SplitError(f"class {int(cls)} has only {len(positions)} examples, needs >= {per_class} for validation")
        validation_mask[positions[-per_class:]] = True
    train_part = (images[~validation_mask], labels[~validation_mask])
    validation_part = (images[validation_mask], labels[validation_mask])
    return train_part, validation_part


def select_labeled_subset(split: DatasetSplit, n_per_class: int, seed: int) -> LabeledIndex:
    """Draw n_per_class labeled train indices per class, uniformly, seeded.

    A request for zero labels is rejected; an unsupervised run is expressed
    through the trainer's lambda = 0 mode instead.
    """
    if n_per_class <= 0:
        raise SelectionError("n_per_class must be >= 1; use lambda=0 for an unsupervised run")
    rng = np.random.default_rng(seed)
    per_class: dict[int, np.ndarray] = {}
    for cls in range(split.class_count):
        positions = np.flatnonzero(split.train_labels == cls)
        if len(positions) < n_per_class:
            raise SelectionError(f"class {cls} has {len(positions)} train examples, cannot label {n_per_class}")
        chosen = rng.choice(positions, size=n_per_class, replace=False)
        per_class[cls] = np.sort(chosen).astype(np.int64)
    return LabeledIndex(per_class_indices=per_class, n_per_class=n_per_class, seed=seed)


def synthetic_shapes(
    class_count: int,
    per_class: int,
    image_size: int,
    seed: int,
    *,
    val_per_class: int = 50,
    test_per_class: int | None = None,
) -> DatasetSplit:
    """Render a deterministic shape dataset for desk-scale runs.

    Each class is a parametric pattern (disk, cross, stripes, ring,
    checkerboard, bars, cycling for higher class counts) with jittered
    position and scale, per-image foreground/background intensities drawn
    from class-independent ranges, and additive Gaussian noise. Intensity
    statistics alone therefore say little about the class; the spatial
    layout does.
    """
    if class_count < 2:
        raise ContractError("need at least 2 classes (triplet sampling requires a negative class)")
    if image_size < 8:
        raise ContractError("image_size must be >= 8")
    if per_class < 1:
        raise ContractError("per_class must be >= 1")
    if test_per_class is None:
        test_per_class = max(per_class // 2, 1)

    rng = np.random.default_rng(seed)

    def render_block(count_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        images = np.empty((class_count * count_per_class, 1, image_size, image_size), dtype=np.float32)
        labels = np.empty(class_count * count_per_class, dtype=np.int64)
        row = 0
        for cls in range(class_count):
            for _ in range(count_per_class):
                images[row, 0] = _render_shape(cls, image_size, rng)
                labels[row] = cls
                row += 1
        return images, labels

    train_images, train_labels = render_block(per_class)
    val_images, val_labels = render_block(val_per_class)
    test_images, test_labels = render_block(test_per_class)
    return DatasetSplit(
        train_images=train_images,
        train_labels=train_labels,
        validation_images=val_images,
        validation_labels=val_labels,
        test_images=test_images,
        test_labels=test_labels,
        class_count=class_count,
        image_shape=(1, image_size, image_size),
    )


def _render_shape(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    background = rng.uniform(0.05, 0.30)
    foreground = rng.uniform(0.55, 0.95)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    scale = rng.uniform(0.8, 1.2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    pattern = cls % 6
    if pattern == 0:  # filled disk
        r = scale * size / 4
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
    elif pattern == 1:  # plus-sign cross
        arm = scale * size * 0.38
        width = max(size / 10, 1.0) * scale
        horiz = (np.abs(ys - cy) <= width) & (np.abs(xs - cx) <= arm)
        vert = (np.abs(xs - cx) <= width) & (np.abs(ys - cy) <= arm)
        mask = horiz | vert
    elif pattern == 2:  # diagonal stripes
        period = scale * size / 3.5
        phase = rng.uniform(0, period)
        mask = ((xs + ys + phase) % period) < period / 2
    elif pattern == 3:  # ring
        r = scale * size / 3.2
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        mask = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    elif pattern == 4:  # checkerboard
        cell = max(scale * size / 5, 1.5)
        phase = rng.uniform(0, cell)
        mask = (((xs + phase) // cell) + ((ys + phase) // cell)) % 2 == 0
    else:  # horizontal bars
        period = scale * size / 3.5
        phase = rng.uniform(0, period)
        mask = ((ys + phase) % period) < period / 2

    image = np.full((size, size), background)
    image[mask] = foreground
    image += rng.normal(0.0, 0.05, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)
