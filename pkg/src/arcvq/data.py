"""IDX (MNIST distribution format) reading/writing and a synthetic grating dataset."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConsistencyError, FormatError, TruncatedFileError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # M x H x H, float64 in [0, 1]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] < 1:
            raise FormatError(f"dataset needs M x H x H images with M >= 1, got dims {list(self.images.shape)}")

    @property
    def H(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_idx(path: str, magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file ends inside the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: file ends inside the IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    if len(raw) > header + size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: Optional[str] = None) -> Dataset:
    """Read an IDX image file (and optional label file); pixels scaled by 1/255."""
    raw = _read_idx(images_path, IMAGE_MAGIC, 3)
    if raw.shape[1] != raw.shape[2]:
        raise FormatError(f"{images_path}: images must be square, got {raw.shape[1]}x{raw.shape[2]}")
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABEL_MAGIC, 1).astype(np.int64)
        if labels.shape[0] != raw.shape[0]:
            raise ConsistencyError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(raw.astype(np.float64) / 255.0, labels)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_idx(images_path: str, ds: Dataset, labels_path: Optional[str] = None) -> None:
    """Write images (rounded to the nearest 1/255 step) and optionally labels."""
    pixels = to_bytes(ds.images)
    m, h, w = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, m, h, w))
        fh.write(pixels.tobytes())
    if labels_path is not None:
        labels = np.zeros(m, dtype=np.uint8) if ds.labels is None else np.asarray(ds.labels, dtype=np.uint8)
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", LABEL_MAGIC, m))
            fh.write(labels.tobytes())


def grating_templates(H: int, clusters: int) -> np.ndarray:
    """``clusters`` sinusoidal gratings with distinct orientation/frequency pairs."""
    yy, xx = np.mgrid[0:H, 0:H].astype(np.float64)
    out = np.empty((clusters, H, H))
    for c in range(clusters):
        theta = np.pi * c / clusters
        freq = 1.5 + (c % 3)  # cycles per image
        phase = 0.7 * c
        u = xx * np.cos(theta) + yy * np.sin(theta)
        out[c] = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * u / H + phase)
    return out


def synth_dataset(M: int, H: int = 28, clusters: int = 10, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Images cycle round-robin over grating templates, plus uniform noise.

    Pixels are clamped to [0, 1] and quantized to 8 bits so the dataset
    survives an IDX round trip unchanged.  Labels are template indices.
    """
    if clusters < 1:
        raise FormatError(f"clusters must be >= 1, got {clusters}")
    rng = np.random.default_rng(seed)
    templates = grating_templates(H, clusters)
    labels = np.arange(M) % clusters
    images = templates[labels] + rng.uniform(-noise, noise, size=(M, H, H))
    images = to_bytes(np.clip(images, 0.0, 1.0)).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64))


def synth_paths(out_dir: str, name: str) -> tuple[str, str]:
    return (
        os.path.join(out_dir, f"{name}-images.idx3-ubyte"),
        os.path.join(out_dir, f"{name}-labels.idx1-ubyte"),
    )
