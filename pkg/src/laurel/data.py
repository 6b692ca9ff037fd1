"""Synthetic classification datasets and an IDX reader/writer."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IDXError):
    pass


class TruncatedError(IDXError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # n x d, float64
    labels: np.ndarray  # n, int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError(f"features must be a non-empty n x d array, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {feats.shape[0]} rows")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(feats).all():
            raise ValueError("features must be finite")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gen_gaussian_mixture(num_classes: int, dim: int, n_per_class: int, spread: float,
                         seed: int, split: str = "train", sample_seed: int | None = None) -> Dataset:
    """Isotropic Gaussian blobs around class centres on the unit sphere.

    Centres come from ``seed``; point noise comes from ``sample_seed``
    (defaults to ``seed``). Train and eval sets of the same task share ``seed``
    and use distinct sample seeds, see :func:`gaussian_mixture_splits`.
    """
    if num_classes < 2 or dim < 2 or n_per_class < 1 or spread < 0:
        raise ValueError("gen_gaussian_mixture: need num_classes >= 2, dim >= 2, "
                         "n_per_class >= 1, spread >= 0")
    centers = mixture_centers(num_classes, dim, seed)
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.normal(0.0, 1.0, (labels.size, dim))
    return Dataset(centers[labels] + spread * noise, labels, num_classes, split)


def mixture_centers(num_classes: int, dim: int, seed: int) -> np.ndarray:
    g = np.random.default_rng([seed, 0]).normal(size=(num_classes, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def gaussian_mixture_splits(num_classes: int, dim: int, n_train: int, n_eval: int,
                            spread: float, seed: int) -> tuple[Dataset, Dataset]:
    """Train and eval draws around the same centres with independent noise."""
    train = gen_gaussian_mixture(num_classes, dim, n_train, spread, seed, "train",
                                 sample_seed=2 * seed + 1)
    test = gen_gaussian_mixture(num_classes, dim, n_eval, spread, seed, "eval",
                                sample_seed=2 * seed + 2)
    return train, test


def gen_spirals(num_classes: int, n_per_class: int, noise: float, seed: int,
                split: str = "train", turns: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms.

    Arm ``k`` is ``r = t``, ``theta = 2*pi*k/K + 2*pi*turns*t`` for ``t`` evenly
    spaced in ``[0, 1]``; Gaussian noise of std ``noise`` is added to both
    coordinates.
    """
    if num_classes < 2 or n_per_class < 1 or noise < 0:
        raise ValueError("gen_spirals: need num_classes >= 2, n_per_class >= 1, noise >= 0")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_per_class)
    feats, labels = [], []
    for k in range(num_classes):
        theta = 2 * np.pi * k / num_classes + 2 * np.pi * turns * t
        feats.append(np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1))
        labels.append(np.full(n_per_class, k))
    feats = np.concatenate(feats)
    feats = feats + noise * rng.normal(size=feats.shape)
    return Dataset(feats, np.concatenate(labels), num_classes, split)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of classifying ``test`` by the closest per-class mean of ``train``."""
    cents = np.stack([train.features[train.labels == c].mean(axis=0)
                      for c in range(train.num_classes)])
    d = ((test.features[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 * (ndim + 1)
    if len(raw) < need:
        raise TruncatedError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]`` by 1/255."""
    img = Path(images_path).read_bytes()
    n, rows, cols = _read_header(img, images_path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + n * rows * cols
    if len(img) < expected:
        raise TruncatedError(f"{images_path}: expected {expected} bytes, got {len(img)}")
    pixels = np.frombuffer(img, np.uint8, n * rows * cols, 16).reshape(n, rows * cols)

    lab = Path(labels_path).read_bytes()
    (n_lab,) = _read_header(lab, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab) < 8 + n_lab:
        raise TruncatedError(f"{labels_path}: expected {8 + n_lab} bytes, got {len(lab)}")
    if n_lab != n:
        raise IDXError(f"image count {n} does not match label count {n_lab}")
    labels = np.frombuffer(lab, np.uint8, n, 8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(pixels / 255.0, labels, num_classes, split)


def write_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write features (multiples of 1/255 in [0, 1]) and labels as an IDX pair."""
    n = len(dataset)
    if rows * cols != dataset.dim:
        raise ValueError(f"{rows}x{cols} does not match feature width {dataset.dim}")
    pixels = np.rint(dataset.features * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("features must lie in [0, 1]")
    if dataset.labels.max() > 255:
        raise ValueError("labels must fit in one byte")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def batches(dataset: Dataset, batch_size: int, epoch_seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One shuffled pass over the data; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]
