"""Dataset ingestion: MNIST-style IDX files and synthetic stand-ins.

Loaders are pure functions of file bytes; nothing here touches the
network.  Pixel bytes are scaled by 1/255 in binary64 and then rounded
into the requested precision, so inputs always live in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .precision import Precision, RoundedTensor
from .streams import stream

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """Base for IDX parse failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: RoundedTensor  # (N, d0), values in [0, 1]
    labels: np.ndarray     # (N,) integer class indices
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.inputs.data.shape[0] != self.labels.shape[0]:
            raise ValueError("input count differs from label count")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        v = self.inputs.as_float64()
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("input values must lie in [0, 1]")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.inputs.data.shape[1])

    def subset(self, n: int) -> "Dataset":
        """First n samples (deterministic prefix)."""
        return Dataset(
            RoundedTensor(self.inputs.data[:n], self.inputs.precision),
            self.labels[:n], self.n_classes, self.split)

    def batches(self, batch_size: int):
        """Fixed consecutive partition, last short batch kept."""
        for start in range(0, self.n_samples, batch_size):
            yield (self.inputs.data[start:start + batch_size],
                   self.labels[start:start + batch_size],
                   np.arange(start, min(start + batch_size, self.n_samples)))


def _read_be_u32(buf: bytes, offset: int, field: str) -> int:
    if len(buf) < offset + 4:
        raise IdxTruncatedError(f"file ends inside the {field} field")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path, precision: Precision = Precision.B64,
             split: str = "train", n_classes: int = 10,
             limit: int | None = None) -> Dataset:
    """Parse a big-endian IDX image/label pair into a Dataset."""
    with open(images_path, "rb") as f:
        img = f.read()
    with open(labels_path, "rb") as f:
        lab = f.read()

    magic = _read_be_u32(img, 0, "image magic")
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(f"image magic is {magic}, expected {IMAGE_MAGIC}")
    count = _read_be_u32(img, 4, "image count")
    rows = _read_be_u32(img, 8, "row count")
    cols = _read_be_u32(img, 12, "column count")
    if len(img) != 16 + count * rows * cols:
        raise IdxTruncatedError(
            f"image payload holds {len(img) - 16} bytes, "
            f"header promises {count * rows * cols}")

    lmagic = _read_be_u32(lab, 0, "label magic")
    if lmagic != LABEL_MAGIC:
        raise IdxMagicError(f"label magic is {lmagic}, expected {LABEL_MAGIC}")
    lcount = _read_be_u32(lab, 4, "label count")
    if len(lab) != 8 + lcount:
        raise IdxTruncatedError(
            f"label payload holds {len(lab) - 8} bytes, header promises {lcount}")
    if lcount != count:
        raise IdxCountMismatchError(
            f"image count {count} != label count {lcount}")

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    values = pixels.astype(np.float64) / 255.0
    return Dataset(RoundedTensor.from_float64(values, precision),
                   labels, n_classes=n_classes, split=split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Seeded stand-in datasets for when MNIST is not on disk."""

    n: int
    d0: int
    k: int
    seed: int = 0
    kind: str = "gaussian-blobs"

    def __post_init__(self):
        if not (self.n >= self.k >= 2):
            raise ValueError("need n >= k >= 2")
        if self.kind not in ("gaussian-blobs", "uniform-random-labels"):
            raise ValueError(f"unknown generator kind {self.kind!r}")


def make_synthetic(spec: SyntheticSpec, precision: Precision = Precision.B64,
                   split: str = "train") -> Dataset:
    """Reproducible synthetic dataset with inputs scaled into [0, 1].

    gaussian-blobs: one unit-variance cluster per class at random centers,
    per-feature min-max scaled (a monotone affine map, so separability is
    preserved).  Labels cycle through the classes, then get shuffled, so
    class counts are balanced.
    uniform-random-labels: inputs uniform on [0, 1], labels independent of
    the inputs.
    """
    rng = stream(spec.seed, "data")
    if spec.kind == "gaussian-blobs":
        centers = rng.normal(0.0, 2.0, size=(spec.k, spec.d0))
        labels = np.arange(spec.n, dtype=np.int64) % spec.k
        rng.shuffle(labels)
        x = centers[labels] + rng.normal(0.0, 1.0, size=(spec.n, spec.d0))
        lo = x.min(axis=0)
        span = x.max(axis=0) - lo
        span[span == 0] = 1.0
        x = (x - lo) / span
    else:
        x = rng.random((spec.n, spec.d0))
        labels = rng.integers(0, spec.k, size=spec.n)
    return Dataset(RoundedTensor.from_float64(x, precision),
                   labels, n_classes=spec.k, split=split)
