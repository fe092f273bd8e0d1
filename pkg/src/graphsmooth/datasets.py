"""Dataset ingestion and normalization.

Two binary formats are supported: IDX (big-endian, magic-prefixed, the classic
grayscale digit layout) and the CIFAR-10 binary layout of 3073-byte records
(1 label byte + 3 x 32 x 32 pixel bytes). Pixels load as floats in [0, 1];
standardization statistics always come from the training split. A seeded
synthetic blob dataset rounds things out so desk-scale experiments run
without any external files.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .rng import substream

__all__ = [
    "Dataset",
    "load_idx",
    "serialize_idx",
    "write_idx",
    "load_cifar_bin",
    "serialize_cifar_bin",
    "normalize",
    "subset",
    "make_synthetic",
]

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_LEN = 3073
CIFAR_CLASSES = 10


@dataclass
class Dataset:
    """Images as (N, C, H, W) floats plus integer labels.

    channel_mean / channel_std are filled by normalize() and always describe
    the training split the statistics came from.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]


def _read_u32be(blob: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(blob):
        raise DataFormatError(f"truncated file: {what} at byte {offset}")
    return struct.unpack_from(">I", blob, offset)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (big-endian, byte pixels).

    Pixels are scaled to [0, 1]; images come out as (N, 1, H, W).
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    magic = _read_u32be(blob, 0, "image magic")
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x} at byte 0")
    n = _read_u32be(blob, 4, "image count")
    h = _read_u32be(blob, 8, "image height")
    w = _read_u32be(blob, 12, "image width")
    if n == 0 or h == 0 or w == 0:
        raise DataFormatError(f"empty dimension in image header ({n}x{h}x{w})")
    expected = 16 + n * h * w
    if len(blob) != expected:
        raise DataFormatError(f"image payload is {len(blob)} bytes, expected {expected} "
                              f"(mismatch from byte {min(len(blob), expected)})")
    images = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    magic = _read_u32be(lblob, 0, "label magic")
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{magic:08x} at byte 0")
    ln = _read_u32be(lblob, 4, "label count")
    if len(lblob) != 8 + ln:
        raise DataFormatError(f"label payload is {len(lblob)} bytes, expected {8 + ln}")
    if ln != n:
        raise DataFormatError(f"{ln} labels for {n} images")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if ln else 0
    return Dataset(images=images.astype(np.float64) / 255.0, labels=labels,
                   num_classes=num_classes)


def serialize_idx(images_u8: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    """IDX byte blobs for (N, 1, H, W) uint8 images and their labels."""
    n, c, h, w = images_u8.shape
    if c != 1:
        raise ValueError("IDX stores single-channel images")
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
    img += images_u8.astype(np.uint8).tobytes(order="C")
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    return img, lab


def write_idx(dataset_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    img, lab = serialize_idx(dataset_u8, labels)
    with open(images_path, "wb") as fh:
        fh.write(img)
    with open(labels_path, "wb") as fh:
        fh.write(lab)


def load_cifar_bin(paths) -> Dataset:
    """Load CIFAR-10 binary batch files (concatenated 3073-byte records)."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    records = []
    for path in paths:
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) == 0:
            raise DataFormatError(f"{path}: empty dataset file")
        if len(blob) % CIFAR_RECORD_LEN != 0:
            raise DataFormatError(f"{path}: length {len(blob)} is not a multiple of "
                                  f"{CIFAR_RECORD_LEN}")
        records.append(np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_LEN))
    raw = np.concatenate(records, axis=0)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DataFormatError(f"label byte {labels[bad]} >= {CIFAR_CLASSES} in record {bad}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images=images, labels=labels, num_classes=CIFAR_CLASSES)


def serialize_cifar_bin(images_u8: np.ndarray, labels: np.ndarray) -> bytes:
    n = images_u8.shape[0]
    recs = np.empty((n, CIFAR_RECORD_LEN), dtype=np.uint8)
    recs[:, 0] = np.asarray(labels, dtype=np.uint8)
    recs[:, 1:] = images_u8.reshape(n, -1)
    return recs.tobytes()


def normalize(train: Dataset, others=()) -> tuple[Dataset, list[Dataset]]:
    """Standardize per channel with statistics from the training split only.

    Every returned dataset (including test splits) is shifted and scaled by
    the training mean and std; a zero-spread channel is guarded with a 1e-6
    floor and logged.
    """
    axes = (0, 2, 3)
    mean = train.images.mean(axis=axes)
    std = train.images.std(axis=axes)
    if np.any(std < 1e-6):
        log.warning("normalize: channel std below 1e-6 clamped (channels %s)",
                    np.nonzero(std < 1e-6)[0].tolist())
        std = np.maximum(std, 1e-6)

    def apply(ds: Dataset) -> Dataset:
        shaped_mean = mean.reshape(1, -1, 1, 1)
        shaped_std = std.reshape(1, -1, 1, 1)
        return Dataset(images=(ds.images - shaped_mean) / shaped_std,
                       labels=ds.labels.copy(), num_classes=ds.num_classes,
                       channel_mean=mean.copy(), channel_std=std.copy())

    return apply(train), [apply(ds) for ds in others]


def subset(dataset: Dataset, n: int) -> Dataset:
    """First n examples, original order."""
    n = min(n, len(dataset))
    return Dataset(images=dataset.images[:n].copy(), labels=dataset.labels[:n].copy(),
                   num_classes=dataset.num_classes,
                   channel_mean=dataset.channel_mean, channel_std=dataset.channel_std)


def _class_templates(num_classes: int, size: int, rng) -> np.ndarray:
    """Smooth per-class blob patterns on a size x size canvas."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.zeros((num_classes, size, size))
    for c in range(num_classes):
        canvas = np.zeros((size, size))
        for _ in range(3):
            cy, cx = rng.uniform(1.0, size - 2.0, size=2)
            sigma = rng.uniform(0.8, 1.8)
            amp = rng.uniform(0.6, 1.0)
            canvas += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma)))
        canvas /= canvas.max()
        templates[c] = canvas
    return templates


def make_synthetic(num_classes: int = 4, train_size: int = 2000, test_size: int = 1000,
                   image_size: int = 8, noise_std: float = 0.18, max_shift: int = 1,
                   seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded blob-classification data at desk scale.

    Each example is its class blob pattern, circularly shifted by up to
    max_shift pixels, plus pixel noise, quantized to the byte grid so the
    images round-trip exactly through the binary formats.
    """
    rng = substream(seed, "data")
    templates = _class_templates(num_classes, image_size, rng)

    def draw(count):
        labels = rng.integers(0, num_classes, size=count)
        images = np.empty((count, 1, image_size, image_size))
        shifts = rng.integers(-max_shift, max_shift + 1, size=(count, 2))
        noise = rng.standard_normal((count, image_size, image_size)) * noise_std
        for i in range(count):
            img = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1)) + noise[i]
            images[i, 0] = img
        images = np.clip(images, 0.0, 1.0)
        images = np.round(images * 255.0) / 255.0
        return Dataset(images=images, labels=labels.astype(np.int64),
                       num_classes=num_classes)

    return draw(train_size), draw(test_size)
