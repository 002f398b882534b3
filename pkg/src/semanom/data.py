"""Labelled image datasets: binary loaders and a synthetic shapes generator.

Images are held as one float64 array of shape N x C x H x W with values in
[0, 1]; labels are int64 class ids.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
CIFAR_RECORD = 1 + 3 * 32 * 32

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SEMT_MAGIC = b"SEMT"
SEMT_VERSION = 1
_SEMT_HEADER = struct.Struct("<4sIIIIII")

SHAPE_KINDS = ("disk", "square", "cross", "bar")


class DataFormatError(ValueError):
    """A dataset file is malformed; nothing is returned for it."""


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k}) for {k} class names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], list(self.class_names))


def concat(datasets: list[LabeledDataset]) -> LabeledDataset:
    names = datasets[0].class_names
    if any(d.class_names != names for d in datasets):
        raise ValueError("cannot concatenate datasets with different class names")
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]), list(names))


# ---------------------------------------------------------------------------
# file formats


def load_cifar_binary(path) -> LabeledDataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(
            f"truncated record: {path} has {raw.size} bytes, not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return LabeledDataset(images, labels, list(CIFAR10_CLASSES))


def _read_idx(path, magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise DataFormatError(f"{path}: magic mismatch, expected 0x{magic:08x}, found 0x{found:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    body = np.frombuffer(buf, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: size mismatch, header dims {dims} need "
                              f"{int(np.prod(dims))} bytes, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """IDX (MNIST-style) image/label pair, images as 1 x H x W in [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(imgs) != len(labels):
        raise DataFormatError(f"count mismatch: {len(imgs)} images in {images_path}, "
                              f"{len(labels)} labels in {labels_path}")
    k = int(labels.max()) + 1 if len(labels) else 0
    return LabeledDataset(imgs[:, None, :, :] / 255.0, labels, [str(i) for i in range(k)])


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    imgs = np.asarray(images, dtype=np.uint8)
    n, h, w = imgs.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + imgs.tobytes())
    labs = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labs)) + labs.tobytes())


def load_raw_tensor(path) -> LabeledDataset:
    """SEMT file: magic | version | N | C | H | W | K (u32 LE) | N label bytes | pixel bytes."""
    buf = Path(path).read_bytes()
    if len(buf) < _SEMT_HEADER.size:
        raise DataFormatError(f"{path}: file too short for a SEMT header")
    magic, version, n, c, h, w, k = _SEMT_HEADER.unpack_from(buf)
    if magic != SEMT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {SEMT_MAGIC!r}")
    if version != SEMT_VERSION:
        raise DataFormatError(f"{path}: unsupported SEMT version {version}")
    expected = _SEMT_HEADER.size + n + n * c * h * w
    if len(buf) != expected:
        raise DataFormatError(f"{path}: size mismatch, header implies {expected} bytes, found {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=_SEMT_HEADER.size)
    labels = body[:n].astype(np.int64)
    if n and labels.max() >= k:
        raise DataFormatError(f"{path}: label {labels.max()} not below K={k}")
    images = body[n:].reshape(n, c, h, w) / 255.0
    return LabeledDataset(images, labels, [str(i) for i in range(k)])


def save_raw_tensor(dataset: LabeledDataset, path) -> None:
    """Write SEMT; pixels are quantised to bytes with round(255 * x)."""
    n, c, h, w = dataset.images.shape
    header = _SEMT_HEADER.pack(SEMT_MAGIC, SEMT_VERSION, n, c, h, w, dataset.n_classes)
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(header + dataset.labels.astype(np.uint8).tobytes() + pixels.tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes


def _shape_sdf(kind: str, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return np.hypot(u, v) - 0.85 * size
    if kind == "square":
        return np.maximum(au, av) - 0.75 * size
    if kind == "cross":
        arm, half = 1.0 * size, 0.3 * size
        return np.minimum(np.maximum(au - arm, av - half), np.maximum(au - half, av - arm))
    if kind == "bar":
        return np.maximum(au - 1.15 * size, av - 0.3 * size)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def _grating(rng: Rng, yy, xx) -> np.ndarray:
    freq = rng.uniform(0.12, 0.35)
    phi = rng.uniform(0, np.pi)
    psi = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(phi) + yy * np.sin(phi)) + psi)


def render_shape(kind: str, image_size: int, rng: Rng, max_angle: float = 30.0) -> np.ndarray:
    """One 3 x S x S image of ``kind`` over a textured, top-lit background.

    Background and foreground textures and colours come from the same
    distribution for every kind, so only the global outline separates classes.
    The object casts a shadow down and to the right.
    """
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    size = rng.uniform(0.27, 0.34) * s
    margin = 1.1 * size
    cy, cx = rng.uniform(margin, s - 1 - margin, size=2) if s - 1 - 2 * margin > 0 else ((s - 1) / 2,) * 2
    theta = np.deg2rad(rng.uniform(-max_angle, max_angle))

    def alpha(dy, dx):
        y, x = yy - cy - dy, xx - cx - dx
        u = x * np.cos(theta) + y * np.sin(theta)
        v = -x * np.sin(theta) + y * np.cos(theta)
        return np.clip(0.5 - _shape_sdf(kind, u, v, size), 0.0, 1.0)

    obj = alpha(0.0, 0.0)
    shadow = alpha(0.06 * s + 0.5, 0.06 * s + 0.5) * (1 - obj)

    bg_col = rng.uniform(0.3, 0.7, size=3)
    fg_shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.45)
    fg_col = np.clip(bg_col + fg_shift + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
    bg_tex = _grating(rng, yy, xx)
    fg_tex = _grating(rng, yy, xx)
    light = 1.1 - 0.25 * yy / s

    bg = bg_col[:, None, None] * (0.85 + 0.15 * bg_tex) * light
    bg = bg * (1 - 0.45 * shadow)
    fg = fg_col[:, None, None] * (0.9 + 0.1 * fg_tex) * light
    img = bg * (1 - obj) + fg * obj
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_shapes(n_per_class: int, classes, image_size: int, rng: Rng,
                 max_angle: float = 30.0) -> LabeledDataset:
    """Balanced dataset of rendered shapes, ``n_per_class`` images per kind in ``classes``."""
    classes = list(classes)
    for kind in classes:
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    images = np.empty((n_per_class * len(classes), 3, image_size, image_size))
    labels = np.repeat(np.arange(len(classes)), n_per_class)
    for c, kind in enumerate(classes):
        stream = rng.child(f"class/{kind}")
        for i in range(n_per_class):
            images[c * n_per_class + i] = render_shape(kind, image_size, stream.child(i), max_angle)
    order = rng.child("order").permutation(len(labels))
    return LabeledDataset(images[order], labels[order], classes)
