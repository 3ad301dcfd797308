"""IDX dataset parsing and the grey-scale data transforms.

Supports the classic big-endian IDX container for unsigned-byte tensors of
rank 1 (labels) and rank 3 (image stacks), with transparent gzip handling.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE_TYPE = 0x08
GZIP_MAGIC = b"\x1f\x8b"


class MagicMismatch(ValueError):
    """First four bytes are not a valid unsigned-byte IDX magic."""


class TruncatedPayload(ValueError):
    """Payload length does not match what the header promises."""


class UnsupportedRank(ValueError):
    """Only rank-1 (labels) and rank-3 (images) files are supported."""


class EmptyInput(ValueError):
    """An operation received an empty score vector."""


@dataclass
class IdxDataset:
    """Grey-scale image stack with optional labels and split metadata."""

    images: np.ndarray  # uint8 [N, H, W]
    labels: np.ndarray | None
    name: str
    split: str

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.dtype != np.uint8:
            raise ValueError("images must be a uint8 [N, H, W] array")
        if self.images.shape[0] < 1:
            raise ValueError("dataset must contain at least one image")
        if self.images.shape[1:] != (28, 28):
            raise ValueError("only native 28x28 datasets are supported")
        if self.labels is not None and len(self.labels) != self.images.shape[0]:
            raise ValueError("labels length must match the number of images")

    @property
    def num_examples(self) -> int:
        return self.images.shape[0]

    @property
    def pixel_dim(self) -> int:
        return self.images.shape[1] * self.images.shape[2]


@dataclass
class BinarizedBatch:
    """Flattened 0/1 pixels [B, D] plus provenance of rows and noise."""

    data: np.ndarray
    source_indices: np.ndarray
    seed_state: str


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path) -> np.ndarray:
    """Parse one IDX file into a uint8 array of rank 1 or 3."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise MagicMismatch(f"{path}: file shorter than a magic number")
    zero, type_code, rank = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or type_code != IDX_UBYTE_TYPE:
        raise MagicMismatch(
            f"{path}: bad magic bytes {raw[:4].hex()}, expected 0000 08 RR"
        )
    if rank not in (1, 3):
        raise UnsupportedRank(f"{path}: rank {rank} not in {{1, 3}}")
    header_len = 4 + 4 * rank
    if len(raw) < header_len:
        raise TruncatedPayload(f"{path}: header truncated")
    dims = struct.unpack(f">{rank}i", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise TruncatedPayload(
            f"{path}: {len(payload) - expected} trailing bytes after the payload"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    """Inverse of `parse_idx`: array of rank 1 or 3 back to IDX bytes."""
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("only uint8 arrays of rank 1 or 3 can be serialized")
    header = struct.pack(">bbbb", 0, 0, IDX_UBYTE_TYPE, array.ndim)
    header += struct.pack(f">{array.ndim}i", *array.shape)
    return header + array.tobytes()


def save_idx(array: np.ndarray, path, compress: bool = False) -> None:
    raw = serialize_idx(array)
    if compress:
        raw = gzip.compress(raw, mtime=0)
    Path(path).write_bytes(raw)


def load_idx(images_path, labels_path=None, name: str | None = None, split: str = "test") -> IdxDataset:
    """Load an image IDX file (and optionally its label file) as a dataset."""
    images = parse_idx(images_path)
    if images.ndim != 3:
        raise UnsupportedRank(f"{images_path}: expected a rank-3 image file")
    labels = None
    if labels_path is not None:
        labels = parse_idx(labels_path)
        if labels.ndim != 1:
            raise UnsupportedRank(f"{labels_path}: expected a rank-1 label file")
    if name is None:
        name = Path(images_path).name.split(".")[0]
    return IdxDataset(images=images, labels=labels, name=name, split=split)


def binarize_dynamic(
    images: np.ndarray,
    rng: np.random.Generator,
    indices: np.ndarray | None = None,
    seed_state: str = "",
) -> BinarizedBatch:
    """Draw each pixel as an independent Bernoulli(pixel / 255).

    Every call produces fresh draws; pass a fixed-seed generator to make an
    evaluation binarization reproducible.
    """
    if images.dtype != np.uint8:
        raise ValueError("binarize_dynamic expects uint8 pixels")
    n = images.shape[0]
    flat = images.reshape(n, -1).astype(np.float64) / 255.0
    draws = rng.random(flat.shape)
    data = (draws < flat).astype(np.float64)
    if indices is None:
        indices = np.arange(n)
    return BinarizedBatch(data=data, source_indices=np.asarray(indices), seed_state=seed_state)


def invert(images: np.ndarray) -> np.ndarray:
    """Grey-scale inversion p -> 255 - p (an involution)."""
    if images.dtype != np.uint8:
        raise ValueError("invert expects uint8 pixels")
    return (255 - images.astype(np.int16)).astype(np.uint8)


def balanced_pair(in_scores: np.ndarray, ood_scores: np.ndarray, rng: np.random.Generator):
    """Equalize set sizes: keep the smaller whole, subsample the larger.

    Subsampling is uniform without replacement and deterministic given the
    generator state. Returns (in_subset, ood_subset) of equal length.
    """
    in_scores = np.asarray(in_scores)
    ood_scores = np.asarray(ood_scores)
    if in_scores.size == 0 or ood_scores.size == 0:
        raise EmptyInput("balanced_pair requires two nonempty score vectors")
    m = min(in_scores.shape[0], ood_scores.shape[0])
    if in_scores.shape[0] > m:
        keep = rng.choice(in_scores.shape[0], size=m, replace=False)
        in_scores = in_scores[np.sort(keep)]
    if ood_scores.shape[0] > m:
        keep = rng.choice(ood_scores.shape[0], size=m, replace=False)
        ood_scores = ood_scores[np.sort(keep)]
    return in_scores, ood_scores
