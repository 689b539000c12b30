"""Bag-structured datasets: synthetic feature bags, MNIST, and the FBAG container.

A dataset keeps every instance row of every bag in one contiguous float32
matrix plus an offsets vector, so batched model code can gather whole groups
of equally sized bags without copying bag by bag.
"""

from __future__ import annotations

import gzip
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    ConfigError,
    DatasetError,
    MagicMismatchError,
    MissingFileError,
    TruncatedFileError,
    VersionMismatchError,
)

__all__ = [
    "Bag",
    "BagDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "split_dataset",
    "load_mnist",
    "save_bags",
    "load_bags",
]


@dataclass(frozen=True, eq=False)
class Bag:
    instances: np.ndarray  # (n, d) float32
    label: int
    bag_id: int

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.label == other.label
            and self.bag_id == other.bag_id
            and self.instances.shape == other.instances.shape
            and np.array_equal(self.instances, other.instances)
        )


class BagDataset:
    """Immutable collection of bags sharing feature dimension and label space.

    ``latent`` optionally carries generator-side ground truth (the latent
    cluster of each synthetic bag); it is metadata and takes no part in
    equality or serialization.
    """

    def __init__(self, features, offsets, labels, bag_ids, num_classes, feature_dim,
                 split="train", latent=None):
        features = np.ascontiguousarray(features, dtype=np.float32)
        offsets = np.asarray(offsets, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        bag_ids = np.asarray(bag_ids, dtype=np.int64)
        num_bags = labels.shape[0]
        if num_classes < 1 or feature_dim < 1:
            raise DatasetError("num_classes and feature_dim must be positive")
        if features.ndim != 2 or features.shape[1] != feature_dim:
            raise DatasetError(
                f"feature matrix shape {features.shape} inconsistent with feature_dim={feature_dim}")
        if offsets.shape != (num_bags + 1,) or bag_ids.shape != (num_bags,):
            raise DatasetError("offsets/bag_ids length inconsistent with labels")
        if offsets[0] != 0 or offsets[-1] != features.shape[0]:
            raise DatasetError("offsets must start at 0 and end at the row count")
        if num_bags and np.any(np.diff(offsets) < 1):
            raise DatasetError("every bag needs at least one instance")
        if num_bags and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"labels outside [0, {num_classes})")
        if np.unique(bag_ids).size != num_bags:
            raise DatasetError("bag_ids must be unique")
        for arr in (features, offsets, labels, bag_ids):
            arr.setflags(write=False)
        self.features = features
        self.offsets = offsets
        self.labels = labels
        self.bag_ids = bag_ids
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.split = split
        self.latent = None if latent is None else np.asarray(latent, dtype=np.int64)

    @classmethod
    def from_bags(cls, bags, num_classes, feature_dim=None, split="train"):
        bags = list(bags)
        if feature_dim is None:
            if not bags:
                raise DatasetError("feature_dim required for an empty bag list")
            feature_dim = bags[0].instances.shape[1]
        for i, bag in enumerate(bags):
            inst = np.asarray(bag.instances)
            if inst.ndim != 2 or inst.shape[1] != feature_dim:
                raise DatasetError(f"bag {i} has instance shape {inst.shape}, expected (n, {feature_dim})")
        sizes = [np.asarray(b.instances).shape[0] for b in bags]
        offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])
        if bags:
            features = np.concatenate([np.asarray(b.instances, dtype=np.float32) for b in bags])
        else:
            features = np.zeros((0, feature_dim), dtype=np.float32)
        return cls(features, offsets, [b.label for b in bags], [b.bag_id for b in bags],
                   num_classes, feature_dim, split)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i) -> Bag:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return Bag(self.features[lo:hi], int(self.labels[i]), int(self.bag_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def bags(self):
        return list(self)

    @property
    def sizes(self):
        return np.diff(self.offsets)

    def __eq__(self, other):
        if not isinstance(other, BagDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
            and self.split == other.split
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.bag_ids, other.bag_ids)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    def __repr__(self):
        return (f"BagDataset(split={self.split!r}, bags={len(self)}, "
                f"feature_dim={self.feature_dim}, num_classes={self.num_classes})")

    def subset(self, indices, split=None) -> BagDataset:
        """Dataset restricted to ``indices`` (positions, kept in the given order)."""
        indices = np.asarray(indices, dtype=np.int64)
        sizes = self.sizes[indices]
        rows = _gather_rows(self.offsets[indices], sizes)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        latent = None if self.latent is None else self.latent[indices]
        return BagDataset(self.features[rows], offsets, self.labels[indices], self.bag_ids[indices],
                          self.num_classes, self.feature_dim, split or self.split, latent)

    def groups(self, indices=None):
        """Yield ``(positions, X, y)`` with bags of equal size stacked.

        ``positions`` index into ``indices``; ``X`` is float64 of shape
        ``(B, n, d)``.
        """
        if indices is None:
            indices = np.arange(len(self))
        indices = np.asarray(indices, dtype=np.int64)
        sizes = self.sizes[indices]
        for n in np.unique(sizes):
            pos = np.flatnonzero(sizes == n)
            starts = self.offsets[indices[pos]]
            rows = starts[:, None] + np.arange(n)
            X = self.features[rows].astype(np.float64)
            yield pos, X, self.labels[indices[pos]]

    def instance_bag_index(self):
        """Bag position of every instance row."""
        return np.repeat(np.arange(len(self)), self.sizes)


def _gather_rows(starts, sizes):
    if len(sizes) == 0:
        return np.zeros(0, dtype=np.int64)
    total = int(sizes.sum())
    shifts = np.repeat(starts - np.concatenate([[0], np.cumsum(sizes)[:-1]]), sizes)
    return np.arange(total) + shifts


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and difficulty of a synthetic feature-bag dataset.

    Every bag gets a latent cluster (uniform) and a class label (drawn from
    ``class_weights``, uniform if None). Its instances are isotropic unit
    Gaussians around a per-(cluster, class) centroid; within a cluster the
    class centroids sit ``class_separation`` apart along a cluster-specific
    direction, so a classifier must see a cluster to learn its decision rule.
    """

    num_bags: int
    instances_per_bag: int = 50
    feature_dim: int = 64
    num_classes: int = 2
    num_latent_clusters: int = 10
    class_separation: float = 3.0
    rng_seed: int = 0
    class_weights: tuple | None = None
    cluster_scale: float = 1.0

    def __post_init__(self):
        for name in ("num_bags", "instances_per_bag", "feature_dim", "num_classes",
                     "num_latent_clusters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be > 0")
        if not self.cluster_scale > 0:
            raise ConfigError("cluster_scale must be > 0")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (self.num_classes,) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError("class_weights must be num_classes non-negative values")


def generate_synthetic(spec: SyntheticSpec, split="train") -> BagDataset:
    if not isinstance(spec, SyntheticSpec):
        raise ConfigError("generate_synthetic expects a SyntheticSpec")
    rng = np.random.default_rng(spec.rng_seed)
    C, K, d, n = spec.num_latent_clusters, spec.num_classes, spec.feature_dim, spec.instances_per_bag

    centers = rng.normal(0.0, spec.cluster_scale, size=(C, d))
    if K == 2:
        direction = rng.normal(size=(C, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        offsets = np.stack([-0.5 * direction, 0.5 * direction], axis=1) * spec.class_separation
    else:
        # random unit vectors in high dimension are near-orthogonal: pairwise gap ~ separation
        u = rng.normal(size=(C, K, d))
        u /= np.linalg.norm(u, axis=2, keepdims=True)
        offsets = u * (spec.class_separation / np.sqrt(2.0))
    centroids = centers[:, None, :] + offsets  # (C, K, d)

    latent = rng.integers(0, C, size=spec.num_bags)
    if spec.class_weights is None:
        labels = rng.integers(0, K, size=spec.num_bags)
    else:
        p = np.asarray(spec.class_weights, dtype=float)
        labels = rng.choice(K, size=spec.num_bags, p=p / p.sum())
    noise = rng.normal(size=(spec.num_bags, n, d))
    X = centroids[latent, labels][:, None, :] + noise

    features = X.reshape(-1, d).astype(np.float32)
    offsets_ = np.arange(spec.num_bags + 1, dtype=np.int64) * n
    return BagDataset(features, offsets_, labels, np.arange(spec.num_bags), K, d, split, latent)


def split_dataset(ds: BagDataset, test_fraction: float, rng_seed: int):
    """Random (train, test) split; bag ids are preserved."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(rng_seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return ds.subset(train_idx, split="train"), ds.subset(test_idx, split="test")


# --- MNIST IDX ---------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_idx_bytes(directory: Path, stem: str) -> bytes:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.is_file():
            opener = gzip.open if candidate.suffix == ".gz" else open
            with opener(candidate, "rb") as fh:
                return fh.read()
    raise MissingFileError(f"{stem} not found in {directory}")


def _parse_idx(raw: bytes, magic: int, ndim: int, name: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{name}: header truncated ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise MagicMismatchError(f"{name}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise TruncatedFileError(
            f"{name}: payload has {len(raw) - header} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_mnist(path, split="train", limit=None) -> BagDataset:
    """Load an MNIST split as single-instance bags (d=784, pixels in [0, 1]).

    Accepts raw or ``.gz`` IDX files. ``limit`` keeps the first ``limit``
    images.
    """
    if split not in _MNIST_FILES:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    directory = Path(path)
    img_stem, lbl_stem = _MNIST_FILES[split]
    images = _parse_idx(_read_idx_bytes(directory, img_stem), IDX_IMAGES_MAGIC, 3, img_stem)
    labels = _parse_idx(_read_idx_bytes(directory, lbl_stem), IDX_LABELS_MAGIC, 1, lbl_stem)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    count = images.shape[0]
    features = images.reshape(count, -1).astype(np.float32) / np.float32(255.0)
    return BagDataset(features, np.arange(count + 1), labels.astype(np.int64), np.arange(count),
                      10, features.shape[1], split)


# --- FBAG container -----------------------------------------------------------
#
# header  : magic b"FBAG" | u32 version | u64 num_bags | u32 feature_dim |
#           u32 num_classes | u8 split code
# record  : i64 bag_id | u32 label | u32 n | n*d float32
# trailer : u32 crc32 of every preceding byte
# all little-endian

FBAG_MAGIC = b"FBAG"
FBAG_VERSION = 1
_HEADER = struct.Struct("<4sIQIIB")
_RECORD = struct.Struct("<qII")
_SPLITS = ("train", "test", "all")


def save_bags(ds: BagDataset, path) -> None:
    split_code = _SPLITS.index(ds.split) if ds.split in _SPLITS else 2
    chunks = [_HEADER.pack(FBAG_MAGIC, FBAG_VERSION, len(ds), ds.feature_dim, ds.num_classes,
                           split_code)]
    le = np.dtype("<f4")
    for i in range(len(ds)):
        lo, hi = ds.offsets[i], ds.offsets[i + 1]
        chunks.append(_RECORD.pack(int(ds.bag_ids[i]), int(ds.labels[i]), int(hi - lo)))
        chunks.append(ds.features[lo:hi].astype(le, copy=False).tobytes())
    body = b"".join(chunks)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load_bags(path) -> BagDataset:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, num_bags, d, num_classes, split_code = _HEADER.unpack_from(raw, 0)
    if magic != FBAG_MAGIC:
        raise MagicMismatchError(f"{path}: not an FBAG file (magic {magic!r})")
    if version != FBAG_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, reader supports {FBAG_VERSION}")
    if split_code >= len(_SPLITS):
        raise DatasetError(f"{path}: unknown split code {split_code}")

    pos = _HEADER.size
    labels, bag_ids, sizes, blocks = [], [], [], []
    for i in range(num_bags):
        if pos + _RECORD.size > len(raw):
            raise TruncatedFileError(f"{path}: truncated in record header of bag {i}")
        bag_id, label, n = _RECORD.unpack_from(raw, pos)
        pos += _RECORD.size
        nbytes = 4 * n * d
        if pos + nbytes > len(raw):
            raise TruncatedFileError(f"{path}: truncated in features of bag {i}")
        blocks.append(np.frombuffer(raw, dtype="<f4", count=n * d, offset=pos).reshape(n, d))
        pos += nbytes
        labels.append(label)
        bag_ids.append(bag_id)
        sizes.append(n)

    remaining = len(raw) - pos
    if remaining < 4:
        raise TruncatedFileError(f"{path}: checksum trailer truncated")
    if remaining > 4:
        raise ChecksumError(f"{path}: {remaining - 4} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", raw, pos)
    if crc != zlib.crc32(raw[:pos]):
        raise ChecksumError(f"{path}: checksum mismatch")

    features = (np.concatenate(blocks).astype(np.float32) if blocks
                else np.zeros((0, d), dtype=np.float32))
    offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])
    return BagDataset(features, offsets, labels, bag_ids, num_classes, d, _SPLITS[split_code])
