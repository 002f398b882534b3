"""Image transforms used in training: rotations, centre masking, crop/flip."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

MASK_SIZE = 16
MASK_WINDOW = 21
# the 21x21 window must leave room for every 16x16 placement on both sides
MIN_MASK_SIDE = MASK_WINDOW + (MASK_WINDOW - MASK_SIZE)


@dataclass
class RotationBatch:
    images: np.ndarray
    rotation_labels: np.ndarray


def rotate(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate the last two axes by k * 90 degrees counter-clockwise."""
    return np.rot90(image, k, axes=(-2, -1))


def rotate_batch(images: np.ndarray, rng: Rng | None = None, mode: str = "all_four") -> RotationBatch:
    """Rotation-prediction batch; label k means a k * 90 degree CCW turn.

    ``all_four`` emits every image four times (labels 0,1,2,3 in turn);
    ``sampled`` emits each image once with a uniformly drawn label.
    """
    images = np.asarray(images)
    if images.shape[-1] != images.shape[-2]:
        raise ValueError(f"rotation needs square images, got spatial shape {images.shape[-2:]}")
    if mode == "all_four":
        out = np.stack([rotate(images, k) for k in range(4)], axis=1)
        out = out.reshape((-1,) + images.shape[1:])
        labels = np.tile(np.arange(4), len(images))
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled rotations need an rng")
        labels = rng.integers(0, 4, size=len(images))
        out = np.stack([rotate(img, k) for img, k in zip(images, labels)]) if len(images) else images.copy()
    else:
        raise ValueError(f"unknown rotation mode {mode!r}")
    return RotationBatch(np.ascontiguousarray(out), labels.astype(np.int64))


def center_window_start(side: int) -> int:
    return (side - MASK_WINDOW) // 2


def draw_mask_position(shape, rng: Rng) -> tuple[int, int]:
    h, w = shape[-2:]
    if h < MIN_MASK_SIDE or w < MIN_MASK_SIDE:
        raise ValueError(f"image {h}x{w} too small for centre masking (need >= {MIN_MASK_SIDE})")
    span = MASK_WINDOW - MASK_SIZE + 1
    top = center_window_start(h) + int(rng.integers(0, span))
    left = center_window_start(w) + int(rng.integers(0, span))
    return top, left


def random_center_mask(image: np.ndarray, rng: Rng) -> np.ndarray:
    """Zero a 16x16 block, in every channel, lying inside the central 21x21 window."""
    top, left = draw_mask_position(image.shape, rng)
    out = np.array(image, dtype=np.float64, copy=True)
    out[..., top:top + MASK_SIZE, left:left + MASK_SIZE] = 0.0
    return out


def crop_flip(image: np.ndarray, pad: int, dy: int, dx: int, flip: bool) -> np.ndarray:
    h, w = image.shape[-2:]
    padded = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)])
    out = padded[..., dy:dy + h, dx:dx + w]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_crop_flip(image: np.ndarray, pad: int, rng: Rng) -> np.ndarray:
    """Zero-pad, random crop back to size, horizontal flip with probability 1/2."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    flip = bool(rng.random() < 0.5)
    return crop_flip(image, pad, dy, dx, flip)
