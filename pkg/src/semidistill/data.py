"""CIFAR-10 binary ingestion, deterministic splits and preprocessing.

Index convention: examples live in one global index space of 60000 ids.
Ids 0..49999 are the official train set (batch files in order), ids
50000..59999 the official test set. Split index lists therefore stay
pairwise disjoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes
RECORDS_PER_FILE = 10000
NUM_CLASSES = 10
IMAGE_SHAPE = (32, 32, 3)
N_TRAIN_OFFICIAL = 50000
N_TEST_OFFICIAL = 10000


@dataclass
class DatasetSource:
    """Decoded dataset plus provenance. Images are uint8 HWC, labels int64."""

    root_path: Path
    checksum: str
    images: np.ndarray  # (60000, 32, 32, 3)
    labels: np.ndarray  # (60000,)
    num_classes: int = NUM_CLASSES
    image_shape: tuple = IMAGE_SHAPE

    @property
    def n_train(self) -> int:
        return N_TRAIN_OFFICIAL

    @property
    def n_test(self) -> int:
        return N_TEST_OFFICIAL


@dataclass
class SplitIndex:
    """Deterministic train/val/test index lists over the global id space."""

    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    checksum: str


@dataclass
class LabeledPartition:
    """Labeled/unlabeled split of the train indices."""

    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    fraction: float
    seed: int
    stratified: bool


@dataclass
class PreprocessSpec:
    normalize_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    normalize_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))
    crop_pad: int = 4
    flip_prob: float = 0.5
    augment_enabled: bool = True

    def __post_init__(self):
        self.normalize_mean = np.asarray(self.normalize_mean, dtype=np.float32)
        self.normalize_std = np.asarray(self.normalize_std, dtype=np.float32)
        if (self.normalize_std <= 0).any():
            raise ConfigError("normalize_std components must be strictly positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")

    def without_augmentation(self) -> "PreprocessSpec":
        return PreprocessSpec(
            normalize_mean=self.normalize_mean,
            normalize_std=self.normalize_std,
            crop_pad=self.crop_pad,
            flip_prob=self.flip_prob,
            augment_enabled=False,
        )


def _decode_batch(raw: bytes, path: Path) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) != RECORDS_PER_FILE * RECORD_BYTES:
        raise DatasetError(
            f"{path}: expected {RECORDS_PER_FILE * RECORD_BYTES} bytes "
            f"({RECORDS_PER_FILE} records of {RECORD_BYTES}), got {len(raw)}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= NUM_CLASSES:
        raise DatasetError(f"{path}: label byte {labels.max()} out of range [0, 9]")
    # planes are R then G then B, each row-major 32x32
    pixels = records[:, 1:].reshape(RECORDS_PER_FILE, 3, 32, 32)
    images = pixels.transpose(0, 2, 3, 1).copy()
    return images, labels


def ingest(root_path) -> DatasetSource:
    """Parse the six CIFAR-10 binary batch files bit-exactly."""
    root = Path(root_path)
    hasher = hashlib.sha256()
    all_images, all_labels = [], []
    for name in TRAIN_FILES + [TEST_FILE]:
        path = root / name
        if not path.is_file():
            raise DatasetError(f"missing dataset file: {path}")
        raw = path.read_bytes()
        hasher.update(raw)
        images, labels = _decode_batch(raw, path)
        all_images.append(images)
        all_labels.append(labels)
    return DatasetSource(
        root_path=root,
        checksum=hasher.hexdigest(),
        images=np.concatenate(all_images),
        labels=np.concatenate(all_labels),
    )


def make_splits(source: DatasetSource, seed: int) -> SplitIndex:
    """Shuffle the official train ids by seed into 40000 train / 10000 val.

    The official test set is kept as-is, which realizes the 4:1:1 ratio
    exactly (40000 / 10000 / 10000).
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(source.n_train)
    n_val = source.n_train // 5
    return SplitIndex(
        train_idx=np.sort(perm[n_val:]).astype(np.int64),
        val_idx=np.sort(perm[:n_val]).astype(np.int64),
        test_idx=np.arange(source.n_train, source.n_train + source.n_test, dtype=np.int64),
        seed=seed,
        checksum=source.checksum,
    )


def partition_labels(
    split: SplitIndex,
    fraction: float,
    seed: int,
    stratified: bool = True,
    labels: np.ndarray | None = None,
) -> LabeledPartition:
    """Split train_idx into labeled/unlabeled prefixes of a seed-fixed order.

    The order does not depend on the fraction, so labeled sets nest across
    fractions for a fixed seed. Stratified mode interleaves classes
    proportionally, keeping per-class labeled counts within +-1 of
    fraction * per-class train count.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    train_idx = np.asarray(split.train_idx)
    n_labeled = int(round(fraction * len(train_idx)))
    rng = np.random.default_rng(seed)

    if stratified:
        if labels is None:
            raise ConfigError("stratified partition requires the label array")
        train_labels = np.asarray(labels)[train_idx]
        keys = np.empty(len(train_idx), dtype=np.float64)
        for cls in range(int(train_labels.max()) + 1):
            members = np.flatnonzero(train_labels == cls)
            if len(members) == 0:
                continue
            order = rng.permutation(len(members))
            # fractional within-class rank; a length-n prefix of the global
            # key order then takes ~fraction of every class
            keys[members[order]] = (np.arange(len(members)) + 0.5) / len(members)
        ordering = train_idx[np.argsort(keys, kind="stable")]
    else:
        ordering = rng.permutation(train_idx)

    return LabeledPartition(
        labeled_idx=ordering[:n_labeled].astype(np.int64),
        unlabeled_idx=ordering[n_labeled:].astype(np.int64),
        fraction=fraction,
        seed=seed,
        stratified=stratified,
    )


def preprocess(image: np.ndarray, spec: PreprocessSpec, rng: np.random.Generator) -> np.ndarray:
    """Augment (optional) and standardize a single 32x32x3 uint8 image.

    Returns float32 HWC. Deterministic given the generator state: one crop
    draw (two offsets) and one flip draw are consumed when augmenting.
    """
    image = np.asarray(image)
    if image.shape != IMAGE_SHAPE:
        raise ConfigError(f"expected image shape {IMAGE_SHAPE}, got {image.shape}")
    if spec.augment_enabled:
        pad = spec.crop_pad
        padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        image = padded[dy : dy + 32, dx : dx + 32]
        if rng.random() < spec.flip_prob:
            image = image[:, ::-1]
    x = image.astype(np.float32) / np.float32(255.0)
    return (x - spec.normalize_mean) / spec.normalize_std


def preprocess_batch(
    images: np.ndarray, spec: PreprocessSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Preprocess a batch to float32 NCHW, matching per-image `preprocess`."""
    if spec.augment_enabled:
        if rng is None:
            raise ConfigError("augmentation requires an rng")
        out = np.stack([preprocess(im, spec, rng) for im in images])
    else:
        x = images.astype(np.float32) / np.float32(255.0)
        out = (x - spec.normalize_mean) / spec.normalize_std
    return out.transpose(0, 3, 1, 2)


def compute_normalization(source: DatasetSource, train_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std (of pixel/255) over the given train images."""
    x = source.images[np.asarray(train_idx)].astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    return mean.astype(np.float32), std.astype(np.float32)


def save_split_manifest(
    path, split: SplitIndex, partition: LabeledPartition | None = None
) -> None:
    doc = {
        "schema_version": 1,
        "seed": split.seed,
        "checksum": split.checksum,
        "train_idx": split.train_idx.tolist(),
        "val_idx": split.val_idx.tolist(),
        "test_idx": split.test_idx.tolist(),
        "fraction": partition.fraction if partition else None,
        "labeled_idx": partition.labeled_idx.tolist() if partition else None,
    }
    Path(path).write_text(json.dumps(doc))


def load_split_manifest(path) -> tuple[SplitIndex, LabeledPartition | None]:
    doc = json.loads(Path(path).read_text())
    split = SplitIndex(
        train_idx=np.asarray(doc["train_idx"], dtype=np.int64),
        val_idx=np.asarray(doc["val_idx"], dtype=np.int64),
        test_idx=np.asarray(doc["test_idx"], dtype=np.int64),
        seed=doc["seed"],
        checksum=doc["checksum"],
    )
    partition = None
    if doc.get("labeled_idx") is not None:
        labeled = np.asarray(doc["labeled_idx"], dtype=np.int64)
        unlabeled = np.setdiff1d(split.train_idx, labeled)
        partition = LabeledPartition(
            labeled_idx=labeled,
            unlabeled_idx=unlabeled,
            fraction=doc["fraction"],
            seed=doc["seed"],
            stratified=True,
        )
    return split, partition
