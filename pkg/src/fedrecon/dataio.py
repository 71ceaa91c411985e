"""Dataset ingestion, non-IID partitioning, synthetic corpora, image output.

File formats handled here, all byte-exact: IDX (big-endian), CIFAR-10 binary
batches, and binary PGM/PPM (P5/P6, maxval 255). Pixels are always scaled to
float64 in [0,1], images stored (N, C, H, W).
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) in [0,1]
    labels: np.ndarray  # (N,) int64
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"dataset {self.name!r}: images {self.images.shape} vs labels {self.labels.shape}"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError(f"dataset {self.name!r}: pixels outside [0,1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str = "") -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], name or self.name)


@dataclass
class Partition:
    client_indices: list  # K disjoint int64 arrays

    def __post_init__(self):
        self.client_indices = [np.asarray(c, dtype=np.int64) for c in self.client_indices]
        flat = np.concatenate(self.client_indices) if self.client_indices else np.array([])
        if len(np.unique(flat)) != flat.size:
            raise ConfigError("partition lists overlap")

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list:
        return [int(c.size) for c in self.client_indices]


# ------------------------------------------------------------------ IDX/CIFAR


def _read_exact(fh, n: int, path, what: str) -> bytes:
    offset = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(
            f"{path}: truncated while reading {what} at byte offset {offset} "
            f"(wanted {n}, got {len(data)})"
        )
    return data


def _read_idx_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic[0] != 0 or magic[1] != 0:
            raise DataFormatError(f"{path}: bad IDX magic {magic!r} at byte offset 0")
        dtype_code, ndim = magic[2], magic[3]
        if dtype_code != 0x08:
            raise DataFormatError(
                f"{path}: unsupported IDX element type 0x{dtype_code:02x} at byte offset 2"
            )
        dims = [
            struct.unpack(">I", _read_exact(fh, 4, path, f"dimension {i}"))[0]
            for i in range(ndim)
        ]
        count = int(np.prod(dims, dtype=np.int64)) if dims else 0
        raw = _read_exact(fh, count, path, "payload")
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError(
                f"{path}: {len(trailing)}+ unexpected trailing bytes at byte offset {fh.tell() - 1}"
            )
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """MNIST-style IDX pair -> dataset with pixels scaled byte/255."""
    images = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError(
            f"{labels_path}: {labels.shape} labels for {images.shape[0]} images"
        )
    pixels = images.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(pixels, labels.astype(np.int64), name=str(images_path))


_CIFAR_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
_CIFAR_RECORD = 1 + 3072


def load_cifar10_binary(directory) -> LabeledDataset:
    """The six standard CIFAR-10 binary batches -> 60,000 3x32x32 images."""
    directory = Path(directory)
    images, labels = [], []
    for fname in _CIFAR_BATCHES:
        path = directory / fname
        if not path.exists():
            raise DataFormatError(f"{path}: missing CIFAR-10 batch file")
        raw = path.read_bytes()
        if len(raw) % _CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(arr[:, 0].astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), name=str(directory))


# ------------------------------------------------------------------- PGM/PPM


def _read_pnm_token(fh, path) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise DataFormatError(f"{path}: truncated header at byte offset {fh.tell()}")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def _pnm_int(fh, path, what: str) -> int:
    token = _read_pnm_token(fh, path)
    try:
        return int(token)
    except ValueError:
        raise DataFormatError(f"{path}: expected integer {what}, got {token!r}")


def read_pnm(path) -> np.ndarray:
    """Binary P5/P6 file -> (C, H, W) float64 in [0,1]."""
    with open(path, "rb") as fh:
        magic = _read_pnm_token(fh, path)
        if magic not in (b"P5", b"P6"):
            raise DataFormatError(f"{path}: unsupported PNM magic {magic!r}")
        w = _pnm_int(fh, path, "width")
        h = _pnm_int(fh, path, "height")
        maxval = _pnm_int(fh, path, "maxval")
        if maxval != 255:
            raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        raw = _read_exact(fh, w * h * channels, path, "pixel payload")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pnm(image: np.ndarray, path) -> None:
    """(C, H, W) in [0,1] -> binary PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataFormatError(f"write_pnm: expected (1|3, H, W), got {image.shape}")
    c, h, w = image.shape
    quantized = np.clip(np.rint(np.clip(image, 0, 1) * 255.0), 0, 255).astype(np.uint8)
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) -> (C, out_h, out_w); half-pixel centers, edges clamped."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0, 1)[None, :, None]
    fx = np.clip(xs - x0, 0, 1)[None, None, :]
    tl = image[:, y0][:, :, x0]
    tr = image[:, y0][:, :, x1]
    bl = image[:, y1][:, :, x0]
    br = image[:, y1][:, :, x1]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def load_image_dir(directory, target_size: int) -> LabeledDataset:
    """Per-class subfolders of PGM/PPM images, resized to target_size."""
    directory = Path(directory)
    classes = sorted(p for p in directory.iterdir() if p.is_dir())
    if not classes:
        raise DataFormatError(f"{directory}: no class subdirectories")
    images, labels = [], []
    for label, cls_dir in enumerate(classes):
        for path in sorted(cls_dir.iterdir()):
            if path.suffix.lower() not in (".pgm", ".ppm"):
                continue
            try:
                img = read_pnm(path)
            except (DataFormatError, OSError) as exc:
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                continue
            images.append(bilinear_resize(img, target_size, target_size))
            labels.append(label)
    if not images:
        raise DataFormatError(f"{directory}: no readable images found")
    return LabeledDataset(np.clip(np.stack(images), 0.0, 1.0), np.array(labels), name=str(directory))


# ---------------------------------------------------------------- partitions


def dirichlet_partition(dataset: LabeledDataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """Per-label client proportions drawn Dirichlet(alpha), remainder-rounded."""
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if num_clients > len(dataset):
        raise ConfigError(f"{num_clients} clients for {len(dataset)} samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    shards: list = [[] for _ in range(num_clients)]
    for label in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == label)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        raw = props * idx.size
        counts = np.floor(raw).astype(np.int64)
        remainder = idx.size - counts.sum()
        if remainder:
            order = np.lexsort((np.arange(num_clients), -(raw - counts)))
            counts[order[:remainder]] += 1
        start = 0
        for client, count in enumerate(counts):
            shards[client].extend(idx[start : start + count].tolist())
            start += count
    return Partition([np.sort(np.array(s, dtype=np.int64)) for s in shards])


# ----------------------------------------------------------------- synthetic

_DIGIT_FONT_ROWS = {
    0: (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    1: (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    2: (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    3: (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    4: (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    5: (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    6: (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    7: (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    8: (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    9: (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
}


def _digit_bitmap(digit: int) -> np.ndarray:
    rows = _DIGIT_FONT_ROWS[digit]
    return np.array([[(r >> (4 - c)) & 1 for c in range(5)] for r in rows], dtype=np.float64)


def synthetic_digits(count: int, seed: int, size: int = 28) -> LabeledDataset:
    """Digit-glyph images with per-sample jitter, contrast and pixel noise."""
    rng = np.random.Generator(np.random.PCG64(seed))
    glyphs = [
        bilinear_resize(_digit_bitmap(d)[None], int(size * 0.75), int(size * 0.55))[0]
        for d in range(10)
    ]
    images = np.zeros((count, 1, size, size))
    labels = rng.integers(0, 10, size=count)
    for i, label in enumerate(labels):
        glyph = glyphs[label] * rng.uniform(0.75, 1.0)
        gh, gw = glyph.shape
        dy = (size - gh) // 2 + int(rng.integers(-2, 3))
        dx = (size - gw) // 2 + int(rng.integers(-2, 3))
        dy = int(np.clip(dy, 0, size - gh))
        dx = int(np.clip(dx, 0, size - gw))
        images[i, 0, dy : dy + gh, dx : dx + gw] = glyph
        images[i, 0] += rng.normal(0.0, 0.02, (size, size))
    return LabeledDataset(np.clip(images, 0, 1), labels, name=f"synthetic_digits[{count}]")


def synthetic_blobs(
    count: int, seed: int, classes: int = 2, shape: tuple = (1, 8, 8), noise: float = 0.08
) -> LabeledDataset:
    """Smooth per-class prototype fields plus noise; fast to train on."""
    rng = np.random.Generator(np.random.PCG64(seed))
    c, h, w = shape
    grid_y, grid_x = np.mgrid[0:h, 0:w]
    protos = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            sig = rng.uniform(0.15, 0.35) * (h + w) / 2
            protos[k, ch] = 0.15 + 0.7 * np.exp(-((grid_y - cy) ** 2 + (grid_x - cx) ** 2) / (2 * sig**2))
    labels = rng.integers(0, classes, size=count)
    images = protos[labels] + rng.normal(0, noise, (count, c, h, w))
    return LabeledDataset(np.clip(images, 0, 1), labels, name=f"synthetic_blobs[{count}]")


# -------------------------------------------------------------------- output


def write_image_grid(images: np.ndarray, path, cols: int) -> None:
    """Row-major grid with 1-pixel separators, written as PGM/PPM."""
    images = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    if images.ndim != 4:
        raise DataFormatError(f"write_image_grid: expected (N,C,H,W), got {images.shape}")
    n, c, h, w = images.shape
    if cols < 1:
        raise ConfigError("cols must be >= 1")
    rows = (n + cols - 1) // cols
    canvas = np.ones((c, rows * h + (rows + 1), cols * w + (cols + 1)))
    for i in range(n):
        r, col = divmod(i, cols)
        y = 1 + r * (h + 1)
        x = 1 + col * (w + 1)
        canvas[:, y : y + h, x : x + w] = images[i]
    write_pnm(canvas, path)


def read_grid_cell(path, index: int, cell_shape: tuple, cols: int) -> np.ndarray:
    """Inverse of write_image_grid for one cell (used by round-trip checks)."""
    c, h, w = cell_shape
    grid = read_pnm(path)
    r, col = divmod(index, cols)
    y = 1 + r * (h + 1)
    x = 1 + col * (w + 1)
    return grid[:, y : y + h, x : x + w]
