"""MNIST IDX ingestion and PGM export.

IDX files may be stored raw or gzip-compressed; compression is detected from
the first two bytes.
"""
from __future__ import annotations

import gzip
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}") from None
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Images as ``(count, rows * cols)`` float64 in [0, 1]."""
    if len(raw) < 16:
        raise FormatError(f"image header needs 16 bytes, got {len(raw)} (offset 0)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x} at offset 0, expected 0x{IMAGE_MAGIC:08x}")
    if rows * cols != SIDE * SIDE:
        raise FormatError(f"image dims {rows}x{cols} at offset 8 do not give {SIDE * SIDE} pixels")
    expected = count * rows * cols
    actual = len(raw) - 16
    if actual != expected:
        raise FormatError(
            f"image payload at offset 16: expected {expected} bytes, got {actual}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    return pixels.astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"label header needs 8 bytes, got {len(raw)} (offset 0)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x} at offset 0, expected 0x{LABEL_MAGIC:08x}")
    actual = len(raw) - 8
    if actual != count:
        raise FormatError(f"label payload at offset 8: expected {count} bytes, got {actual}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if np.any(labels > 9):
        raise FormatError("label values must lie in 0..9")
    return labels.astype(np.int64)


def load_idx_images(path) -> np.ndarray:
    return parse_idx_images(_read_bytes(path))


def load_idx_labels(path) -> np.ndarray:
    return parse_idx_labels(_read_bytes(path))


def write_idx_images(images: np.ndarray, path, compress: bool = False) -> None:
    """Write ``uint8`` images ``(count, 784)`` as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    raw = struct.pack(">IIII", IMAGE_MAGIC, images.shape[0], SIDE, SIDE) + images.tobytes()
    Path(path).write_bytes(gzip.compress(raw, mtime=0) if compress else raw)


def write_idx_labels(labels: np.ndarray, path, compress: bool = False) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    raw = struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()
    Path(path).write_bytes(gzip.compress(raw, mtime=0) if compress else raw)


@dataclass(frozen=True, eq=False)
class ImageDataset:
    images: np.ndarray  # (count, 784), values in [0, 1]
    labels: np.ndarray | None
    split: str

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != SIDE * SIDE:
            raise FormatError(f"images must be (count, {SIDE * SIDE})")
        if np.any(self.images < 0) or np.any(self.images > 1):
            raise FormatError("pixel values must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise FormatError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self) -> int:
        return self.images.shape[0]


def default_data_dir() -> Path:
    return Path(os.environ.get("JPMAP_DATA_DIR", "data/mnist"))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_split(split: str, data_dir=None) -> ImageDataset:
    if split not in FILES:
        raise ParameterError(f"split must be one of {sorted(FILES)}")
    directory = Path(data_dir) if data_dir is not None else default_data_dir()
    img_stem, lbl_stem = FILES[split]
    images = load_idx_images(_find(directory, img_stem))
    try:
        labels = load_idx_labels(_find(directory, lbl_stem))
    except FileNotFoundError:
        labels = None
    return ImageDataset(images, labels, split)


def select_test_images(dataset: ImageDataset, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``count`` images after a seeded shuffle; returns ``(indices, images)``."""
    if not 1 <= count <= len(dataset):
        raise ParameterError(f"need 1 <= count <= {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))[:count]
    return order, dataset.images[order]


# ---------------------------------------------------------------- PGM export

def to_bytes(image) -> np.ndarray:
    """Clip to [0, 1] and quantize to ``uint8``."""
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ParameterError("cannot export non-finite pixels")
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def export_pgm(image, path) -> None:
    pixels = to_bytes(image).reshape(SIDE, SIDE)
    Path(path).write_bytes(pgm_bytes(pixels))


GRID_GAP = 2
GRID_FILL = 128


def grid_pixels(images, cols: int) -> np.ndarray:
    images = [to_bytes(im).reshape(SIDE, SIDE) for im in images]
    if not images:
        raise ParameterError("grid needs at least one image")
    if cols < 1:
        raise ParameterError("cols must be >= 1")
    rows = -(-len(images) // cols)
    height = rows * SIDE + (rows - 1) * GRID_GAP
    width = cols * SIDE + (cols - 1) * GRID_GAP
    canvas = np.full((height, width), GRID_FILL, dtype=np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        top, left = r * (SIDE + GRID_GAP), c * (SIDE + GRID_GAP)
        canvas[top:top + SIDE, left:left + SIDE] = im
    return canvas


def export_grid(images, cols: int, path) -> None:
    """Tile images row-major with 2-pixel separators at gray level 128."""
    Path(path).write_bytes(pgm_bytes(grid_pixels(images, cols)))
