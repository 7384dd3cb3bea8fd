"""Datasets: IDX ingestion and a synthetic Gaussian-blob generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, h, w, c] in [0, 1]
    labels: np.ndarray  # int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, h, w, c], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("images must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    payload = raw[4 + 4 * ndim :]
    need = int(np.prod(dims, dtype=np.int64))
    if len(payload) < need:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload[:need], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a Dataset."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labs = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if len(imgs) != len(labs):
        raise DataError(f"count mismatch: {len(imgs)} images, {len(labs)} labels")
    return Dataset(imgs[..., None] / 255.0, labs.astype(np.int64), split, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``[n, h, w]`` (or floats in [0,1]) and labels as IDX; ``.gz`` paths are gzipped."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    if images.ndim == 4:
        images = images[..., 0]
    labels = np.asarray(labels).astype(np.uint8)
    for path, magic, arr in ((images_path, IDX_IMAGES, images), (labels_path, IDX_LABELS, labels)):
        blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
        path = Path(path)
        path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)


def synth_blobs(
    num_classes: int,
    n_per_class: int,
    shape: tuple[int, ...] = (8, 8, 1),
    separation: float = 1.0,
    seed: int = 0,
    sigma: float = 0.05,
    split: str = "train",
    max_tries: int = 10_000,
) -> Dataset:
    """Gaussian clusters around random centers, pairwise ``separation`` apart, clipped to [0, 1].

    Samples are interleaved by class (0, 1, ..., 0, 1, ...).
    """
    if separation <= 0:
        raise DataError("separation must be positive")
    if n_per_class < 1 or num_classes < 1:
        raise DataError("empty dataset requested")
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    lo, hi = min(0.5, 2 * sigma), max(0.5, 1 - 2 * sigma)
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < num_classes:
        tries += 1
        if tries > max_tries:
            raise DataError(f"cannot place {num_classes} centers {separation} apart in {d} dimensions")
        c = rng.uniform(lo, hi, d)
        if all(np.linalg.norm(c - o) >= separation for o in centers):
            centers.append(c)
    labels = np.tile(np.arange(num_classes), n_per_class)
    noise = rng.normal(0.0, sigma, (len(labels), d))
    x = np.clip(np.stack(centers)[labels] + noise, 0.0, 1.0)
    return Dataset(x.reshape(len(labels), *shape), labels, split, num_classes)
